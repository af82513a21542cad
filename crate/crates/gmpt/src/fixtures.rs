//! Structured test meshes: sphere, cube and box objects inside a truncated exterior.
//!
//! A tensor grid symmetric about the origin is split into tets with the Kuhn
//! six-tet pattern, the diagonal of every cell pointing away from the origin in
//! each axis, so the triangulation is invariant under the 48 axis permutations
//! and reflections. The sphere is obtained by mapping cube shells radially onto
//! spherical shells.

use gmpt_core::linalg::{norm, Vec3};

use crate::mesh::{FaceTag, MeshError, Region, TetMesh};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Ball of the given radius.
    Sphere { radius: f64 },
    /// Axis-aligned box with the given half-widths.
    Box { half: Vec3 },
}

impl Shape {
    pub fn cube(half: f64) -> Shape {
        Shape::Box { half: [half; 3] }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => 2.0 * radius,
            Shape::Box { half } => 2.0 * norm(half),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureSpec {
    pub shape: Shape,
    /// Cells per half-width across the object.
    pub cells_in: usize,
    /// Graded cells between the object and the truncation boundary.
    pub cells_out: usize,
    /// Truncation radius as a multiple of the object diameter.
    pub far_factor: f64,
}

impl FixtureSpec {
    pub fn new(shape: Shape, cells_in: usize, cells_out: usize) -> Self {
        FixtureSpec { shape, cells_in, cells_out, far_factor: 5.0 }
    }

    /// Same fixture with every grid interval split in two.
    pub fn refined(&self) -> Self {
        FixtureSpec { cells_in: 2 * self.cells_in, cells_out: 2 * self.cells_out, ..*self }
    }

    pub fn far_radius(&self) -> f64 {
        self.far_factor * self.shape.diameter()
    }

    pub fn build(&self) -> Result<TetMesh, MeshError> {
        build(self)
    }
}

/// Node coordinates on [0, r_far] along one axis: `n_in` uniform cells up to
/// `a`, then `n_out` geometrically growing cells to `r_far`.
fn half_axis(a: f64, r_far: f64, n_in: usize, n_out: usize) -> Vec<f64> {
    let h = a / n_in as f64;
    let mut nodes: Vec<f64> = (0..=n_in).map(|k| a * k as f64 / n_in as f64).collect();
    if n_out == 0 {
        return nodes;
    }
    let span = r_far - a;
    // growth g with h (g^n − 1)/(g − 1) = span; bisection on g ≥ 1
    let total = |g: f64| {
        if (g - 1.0).abs() < 1e-12 {
            h * n_out as f64
        } else {
            h * (g.powi(n_out as i32) - 1.0) / (g - 1.0)
        }
    };
    let g = if total(1.0) >= span {
        1.0
    } else {
        let (mut lo, mut hi) = (1.0, 2.0);
        while total(hi) < span {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if total(mid) < span {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let step0 = if g == 1.0 { span / n_out as f64 } else { h };
    let mut x = a;
    let mut step = step0;
    for k in 0..n_out {
        x = if k + 1 == n_out { r_far } else { x + step };
        nodes.push(x);
        step *= g;
    }
    nodes
}

fn full_axis(half: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = half.iter().rev().map(|x| -x).collect();
    v.pop();
    v.extend_from_slice(half);
    v
}

fn build(spec: &FixtureSpec) -> Result<TetMesh, MeshError> {
    let r_far = spec.far_radius();
    let (half, n_in, sphere_radius) = match spec.shape {
        Shape::Sphere { radius } => ([radius; 3], spec.cells_in, Some(radius)),
        Shape::Box { half } => (half, spec.cells_in, None),
    };
    let axes: Vec<Vec<f64>> = (0..3)
        .map(|i| full_axis(&half_axis(half[i], r_far, n_in, spec.cells_out)))
        .collect();
    let dims = [axes[0].len(), axes[1].len(), axes[2].len()];
    let centre = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let vid = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;

    let mut grid = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                grid.push([axes[0][i], axes[1][j], axes[2][k]]);
            }
        }
    }

    let inside = |idx: [usize; 3]| -> bool {
        // a cell is object when its grid indices lie within the n_in band around the centre
        (0..3).all(|a| {
            let lo = centre[a] - n_in;
            let hi = centre[a] + n_in;
            idx[a] >= lo && idx[a] < hi
        })
    };

    let mut tets = Vec::new();
    let mut regions = Vec::new();
    for i in 0..dims[0] - 1 {
        for j in 0..dims[1] - 1 {
            for k in 0..dims[2] - 1 {
                let cell = [i, j, k];
                let region = if inside(cell) { Region::Object } else { Region::Exterior };
                // corner nearest the origin along each axis is the Kuhn start
                let flip: [bool; 3] = std::array::from_fn(|a| cell[a] < centre[a]);
                let corner = |bits: [usize; 3]| {
                    let c: [usize; 3] = std::array::from_fn(|a| {
                        let b = if flip[a] { 1 - bits[a] } else { bits[a] };
                        cell[a] + b
                    });
                    vid(c[0], c[1], c[2])
                };
                for perm in PERMUTATIONS {
                    let mut bits = [0usize; 3];
                    let mut path = [0usize; 4];
                    path[0] = corner(bits);
                    for (s, &axis) in perm.iter().enumerate() {
                        bits[axis] = 1;
                        path[s + 1] = corner(bits);
                    }
                    // orientation from the undeformed grid; the validator rejects inversion by the map
                    let pts = path.map(|v| grid[v]);
                    let tet = if crate::mesh::tet_volume(&pts) < 0.0 {
                        [path[1], path[0], path[2], path[3]]
                    } else {
                        path
                    };
                    tets.push(tet);
                    regions.push(region);
                }
            }
        }
    }
    let vertices = match sphere_radius {
        Some(r) => grid.iter().map(|p| ball_map(p, r)).collect(),
        None => grid,
    };
    let faces = tag_faces(&tets, &regions);
    TetMesh::new(vertices, tets, regions, faces)
}

const PERMUTATIONS: [[usize; 3]; 6] =
    [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Cube shells |p|_∞ = ρ become spheres of radius ρ outside ρ = r through the
/// elliptical cube-to-sphere map; between ρ = r/2 and r, points move along straight
/// lines from the inner cube surface to the sphere.
fn ball_map(p: &Vec3, r: f64) -> Vec3 {
    let rho = p.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if rho == 0.0 {
        return *p;
    }
    let u = [p[0] / rho, p[1] / rho, p[2] / rho];
    let sq = [u[0] * u[0], u[1] * u[1], u[2] * u[2]];
    let s = [
        u[0] * (1.0 - sq[1] / 2.0 - sq[2] / 2.0 + sq[1] * sq[2] / 3.0).sqrt(),
        u[1] * (1.0 - sq[2] / 2.0 - sq[0] / 2.0 + sq[2] * sq[0] / 3.0).sqrt(),
        u[2] * (1.0 - sq[0] / 2.0 - sq[1] / 2.0 + sq[0] * sq[1] / 3.0).sqrt(),
    ];
    if rho >= r {
        return std::array::from_fn(|i| rho * s[i]);
    }
    if rho <= 0.5 * r {
        return *p;
    }
    // straight rays from the inner cube surface to the sphere
    let t = (rho - 0.5 * r) / (0.5 * r);
    std::array::from_fn(|i| (1.0 - t) * 0.5 * r * u[i] + t * r * s[i])
}

/// GAMMA on object/exterior faces, FAR on outer boundary faces, in tet order.
pub fn tag_faces(tets: &[[usize; 4]], regions: &[Region]) -> Vec<([usize; 3], FaceTag)> {
    use std::collections::HashMap;
    let mut owners: HashMap<[usize; 3], Vec<usize>> = HashMap::new();
    let mut order: Vec<([usize; 3], [usize; 3])> = Vec::new();
    for (t, tet) in tets.iter().enumerate() {
        for opp in 0..4 {
            let f: Vec<usize> = (0..4).filter(|&k| k != opp).map(|k| tet[k]).collect();
            let face = [f[0], f[1], f[2]];
            let mut key = face;
            key.sort_unstable();
            let entry = owners.entry(key).or_default();
            if entry.is_empty() {
                order.push((key, face));
            }
            entry.push(t);
        }
    }
    let mut faces = Vec::new();
    for (key, face) in order {
        let own = &owners[&key];
        match own.as_slice() {
            [_] => faces.push((face, FaceTag::Far)),
            [a, b] if regions[*a] != regions[*b] => faces.push((face, FaceTag::Gamma)),
            _ => {}
        }
    }
    faces
}

/// Minimal cube-in-shell mesh: one regular object tet cut from the cube
/// [−1,1]³ and the four corner tets around it.
pub fn five_tet_cube() -> TetMesh {
    let vertices = vec![
        [-1.0, -1.0, -1.0],
        [1.0, 1.0, -1.0],
        [1.0, -1.0, 1.0],
        [-1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [1.0, 1.0, 1.0],
    ];
    let raw = [[0, 1, 2, 3], [4, 0, 1, 2], [5, 0, 1, 3], [6, 0, 2, 3], [7, 1, 2, 3]];
    let mut tets = Vec::new();
    for t in raw {
        let pts = t.map(|v| vertices[v]);
        tets.push(if crate::mesh::tet_volume(&pts) < 0.0 { [t[1], t[0], t[2], t[3]] } else { t });
    }
    let regions =
        vec![Region::Object, Region::Exterior, Region::Exterior, Region::Exterior, Region::Exterior];
    let faces = tag_faces(&tets, &regions);
    TetMesh::new(vertices, tets, regions, faces).expect("five-tet fixture is valid")
}
