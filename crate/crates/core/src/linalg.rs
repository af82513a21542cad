//! Small fixed-size vector and matrix helpers for three dimensions.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: &Vec3) -> f64 {
    libm::sqrt(dot(a, a))
}

#[inline]
pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn det(a: &Mat3) -> f64 {
    dot(&a[0], &cross(&a[1], &a[2]))
}

/// Largest entry of |QᵀQ − I|.
pub fn orthogonality_defect(q: &Mat3) -> f64 {
    let qtq = mat_mul(&transpose(q), q);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((qtq[i][j] - target).abs());
        }
    }
    worst
}

/// Rotation by `angle` radians about `axis` (normalised internally).
pub fn rotation_axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let n = norm(axis);
    if n == 0.0 || angle == 0.0 {
        return IDENTITY;
    }
    let u = scale(axis, 1.0 / n);
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    let t = 1.0 - c;
    [
        [
            c + u[0] * u[0] * t,
            u[0] * u[1] * t - u[2] * s,
            u[0] * u[2] * t + u[1] * s,
        ],
        [
            u[1] * u[0] * t + u[2] * s,
            c + u[1] * u[1] * t,
            u[1] * u[2] * t - u[0] * s,
        ],
        [
            u[2] * u[0] * t - u[1] * s,
            u[2] * u[1] * t + u[0] * s,
            c + u[2] * u[2] * t,
        ],
    ]
}

/// Rotation from a rotation vector (axis scaled by angle).
pub fn rotation_from_vector(w: &Vec3) -> Mat3 {
    rotation_axis_angle(w, norm(w))
}

/// Inverse of [`rotation_from_vector`] for proper rotations.
pub fn rotation_to_vector(r: &Mat3) -> Vec3 {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let cos = ((tr - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = libm::acos(cos);
    if angle < 1e-12 {
        return [
            0.5 * (r[2][1] - r[1][2]),
            0.5 * (r[0][2] - r[2][0]),
            0.5 * (r[1][0] - r[0][1]),
        ];
    }
    let s = libm::sin(angle);
    if s > 1e-6 {
        let f = angle / (2.0 * s);
        return [
            f * (r[2][1] - r[1][2]),
            f * (r[0][2] - r[2][0]),
            f * (r[1][0] - r[0][1]),
        ];
    }
    // angle close to pi: axis from the symmetric part
    let mut axis = [0.0; 3];
    let diag = [r[0][0], r[1][1], r[2][2]];
    let k = (0..3)
        .max_by(|&a, &b| diag[a].partial_cmp(&diag[b]).unwrap_or(core::cmp::Ordering::Equal))
        .unwrap_or(0);
    axis[k] = libm::sqrt(((diag[k] + 1.0) * 0.5).max(0.0));
    for j in 0..3 {
        if j != k {
            axis[j] = (r[k][j] + r[j][k]) / (4.0 * axis[k]);
        }
    }
    let sign_ref = [
        r[2][1] - r[1][2],
        r[0][2] - r[2][0],
        r[1][0] - r[0][1],
    ];
    if dot(&axis, &sign_ref) < 0.0 {
        axis = scale(&axis, -1.0);
    }
    scale(&axis, angle / norm(&axis))
}
