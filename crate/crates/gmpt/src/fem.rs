//! Lowest-order curl-conforming (Whitney) edge elements on tetrahedra.

use gmpt_core::linalg::{cross, dot, Vec3};
use num_complex::Complex64 as C64;

use crate::mesh::{TetMesh, LOCAL_EDGES};

/// Barycentric gradients and volume of one tet.
#[derive(Debug, Clone, Copy)]
pub struct TetGeometry {
    pub points: [Vec3; 4],
    pub grads: [Vec3; 4],
    pub volume: f64,
}

impl TetGeometry {
    pub fn new(points: [Vec3; 4]) -> Self {
        let e1 = sub(&points[1], &points[0]);
        let e2 = sub(&points[2], &points[0]);
        let e3 = sub(&points[3], &points[0]);
        let det = dot(&e1, &cross(&e2, &e3));
        // rows of the inverse Jacobian are cofactor vectors / det
        let g1 = scale(&cross(&e2, &e3), 1.0 / det);
        let g2 = scale(&cross(&e3, &e1), 1.0 / det);
        let g3 = scale(&cross(&e1, &e2), 1.0 / det);
        let g0 = [-(g1[0] + g2[0] + g3[0]), -(g1[1] + g2[1] + g3[1]), -(g1[2] + g2[2] + g3[2])];
        TetGeometry { points, grads: [g0, g1, g2, g3], volume: det / 6.0 }
    }

    pub fn of(mesh: &TetMesh, t: usize) -> Self {
        Self::new(mesh.tet_points(t))
    }

    pub fn point(&self, lambda: &[f64]) -> Vec3 {
        let mut x = [0.0; 3];
        for (l, p) in lambda.iter().zip(&self.points) {
            for i in 0..3 {
                x[i] += l * p[i];
            }
        }
        x
    }

    /// Local Whitney function λ_a∇λ_b − λ_b∇λ_a for local edge `n` (local orientation).
    pub fn basis(&self, n: usize, lambda: &[f64]) -> Vec3 {
        let (a, b) = LOCAL_EDGES[n];
        let (ga, gb) = (&self.grads[a], &self.grads[b]);
        [
            lambda[a] * gb[0] - lambda[b] * ga[0],
            lambda[a] * gb[1] - lambda[b] * ga[1],
            lambda[a] * gb[2] - lambda[b] * ga[2],
        ]
    }

    /// Constant curl 2∇λ_a × ∇λ_b of local edge `n`.
    pub fn curl_basis(&self, n: usize) -> Vec3 {
        let (a, b) = LOCAL_EDGES[n];
        scale(&cross(&self.grads[a], &self.grads[b]), 2.0)
    }

    /// ∫ curl w_i · curl w_j (local orientation).
    pub fn stiffness(&self) -> [[f64; 6]; 6] {
        let curls: [Vec3; 6] = std::array::from_fn(|n| self.curl_basis(n));
        let mut k = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                k[i][j] = self.volume * dot(&curls[i], &curls[j]);
            }
        }
        k
    }

    /// ∫ w_i · w_j (local orientation), using ∫ λ_p λ_q = |T|(1 + δ_pq)/20.
    pub fn mass(&self) -> [[f64; 6]; 6] {
        let mut gg = [[0.0; 4]; 4];
        for p in 0..4 {
            for q in 0..4 {
                gg[p][q] = dot(&self.grads[p], &self.grads[q]);
            }
        }
        let ll = |p: usize, q: usize| if p == q { self.volume / 10.0 } else { self.volume / 20.0 };
        let mut m = [[0.0; 6]; 6];
        for (i, &(a, b)) in LOCAL_EDGES.iter().enumerate() {
            for (j, &(c, d)) in LOCAL_EDGES.iter().enumerate() {
                m[i][j] = ll(a, c) * gg[b][d] - ll(a, d) * gg[b][c] - ll(b, c) * gg[a][d]
                    + ll(b, d) * gg[a][c];
            }
        }
        m
    }
}

fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Signed local dofs of tet `t` gathered from global edge values.
pub fn local_dofs(mesh: &TetMesh, dofs: &[C64], t: usize) -> [C64; 6] {
    let edges = mesh.tet_edges(t);
    std::array::from_fn(|n| dofs[edges[n]] * mesh.edge_sign(t, n))
}

/// Field value from signed local dofs.
pub fn eval_field(geom: &TetGeometry, local: &[C64; 6], lambda: &[f64]) -> [C64; 3] {
    let mut out = [C64::new(0.0, 0.0); 3];
    for (n, &c) in local.iter().enumerate() {
        let w = geom.basis(n, lambda);
        for i in 0..3 {
            out[i] += c * w[i];
        }
    }
    out
}

/// Curl value (constant per tet) from signed local dofs.
pub fn eval_curl(geom: &TetGeometry, local: &[C64; 6]) -> [C64; 3] {
    let mut out = [C64::new(0.0, 0.0); 3];
    for (n, &c) in local.iter().enumerate() {
        let w = geom.curl_basis(n);
        for i in 0..3 {
            out[i] += c * w[i];
        }
    }
    out
}

/// Edge-element interpolant of a smooth field: dof = ∫_edge f · t along the global orientation,
/// evaluated with Gauss–Legendre quadrature.
pub fn interpolate(mesh: &TetMesh, f: impl Fn(&Vec3) -> [C64; 3]) -> Vec<C64> {
    const GL: [(f64, f64); 4] = [
        (0.069_431_844_202_973_71, 0.173_927_422_568_726_93),
        (0.330_009_478_207_571_87, 0.326_072_577_431_273_07),
        (0.669_990_521_792_428_1, 0.326_072_577_431_273_07),
        (0.930_568_155_797_026_3, 0.173_927_422_568_726_93),
    ];
    mesh.edges()
        .iter()
        .map(|&[a, b]| {
            let (pa, pb) = (mesh.vertices()[a], mesh.vertices()[b]);
            let t = sub(&pb, &pa);
            GL.iter()
                .map(|&(s, w)| {
                    let x = [pa[0] + s * t[0], pa[1] + s * t[1], pa[2] + s * t[2]];
                    let v = f(&x);
                    (v[0] * t[0] + v[1] * t[1] + v[2] * t[2]) * w
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::grundmann_moller;

    fn sample_tet() -> TetGeometry {
        TetGeometry::new([[0.1, 0.0, -0.2], [1.2, 0.1, 0.0], [0.3, 0.9, 0.1], [0.2, 0.3, 1.1]])
    }

    #[test]
    fn barycentric_gradients_reproduce_coordinates() {
        let g = sample_tet();
        for (k, p) in g.points.iter().enumerate() {
            for (l, grad) in g.grads.iter().enumerate() {
                // λ_l(p_k) − λ_l(p_0) = ∇λ_l · (p_k − p_0)
                let delta = dot(grad, &sub(p, &g.points[0]));
                let expect = f64::from(u8::from(l == k)) - f64::from(u8::from(l == 0));
                assert!((delta - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn whitney_tangential_moments_are_kronecker() {
        let g = sample_tet();
        // ∫_edge w_n · t ds = 1 on its own edge, 0 on others (midpoint rule exact: w·t is constant)
        for (m, &(a, b)) in LOCAL_EDGES.iter().enumerate() {
            let t = sub(&g.points[b], &g.points[a]);
            let mut lambda = [0.0; 4];
            lambda[a] = 0.5;
            lambda[b] = 0.5;
            for n in 0..6 {
                let v = dot(&g.basis(n, &lambda), &t);
                let expect = if n == m { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-13, "edge {m} basis {n}: {v}");
            }
        }
    }

    #[test]
    fn mass_matches_quadrature() {
        let g = sample_tet();
        let rule = grundmann_moller(3, 2);
        let m = g.mass();
        for i in 0..6 {
            for j in 0..6 {
                let q: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(l, w)| w * g.volume * dot(&g.basis(i, l), &g.basis(j, l)))
                    .sum();
                assert!((q - m[i][j]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn curl_of_basis_matches_finite_differences() {
        let g = sample_tet();
        // express w_n as a function of x via barycentric coordinates
        let bary = |x: &Vec3| -> [f64; 4] {
            let d = sub(x, &g.points[0]);
            let l1 = dot(&g.grads[1], &d);
            let l2 = dot(&g.grads[2], &d);
            let l3 = dot(&g.grads[3], &d);
            [1.0 - l1 - l2 - l3, l1, l2, l3]
        };
        let x0 = g.point(&[0.25, 0.25, 0.25, 0.25]);
        let h = 1e-6;
        for n in 0..6 {
            let mut jac = [[0.0; 3]; 3];
            for k in 0..3 {
                let mut xp = x0;
                xp[k] += h;
                let mut xm = x0;
                xm[k] -= h;
                let (wp, wm) = (g.basis(n, &bary(&xp)), g.basis(n, &bary(&xm)));
                for i in 0..3 {
                    jac[i][k] = (wp[i] - wm[i]) / (2.0 * h);
                }
            }
            let curl = [jac[2][1] - jac[1][2], jac[0][2] - jac[2][0], jac[1][0] - jac[0][1]];
            let exact = g.curl_basis(n);
            for i in 0..3 {
                assert!((curl[i] - exact[i]).abs() < 1e-7);
            }
        }
    }
}
