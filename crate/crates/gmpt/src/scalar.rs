//! Pólya–Szegő tensor from the scalar transmission problem
//! ∇·(a∇u_j) = 0, a = k in B and 1 outside, u_j = ξ_j on the truncation boundary,
//! discretised with continuous piecewise-linear elements and solved by Jacobi PCG.
//!
//! T_ij(k) = (k − 1) ∫_Γ u_j n_i dS.

use gmpt_core::linalg::{dot, Mat3};

use crate::fem::TetGeometry;
use crate::mesh::{FaceTag, Region, TetMesh};

#[derive(Debug, thiserror::Error)]
pub enum ScalarError {
    #[error("contrast must be finite and non-negative, got {0}")]
    InvalidContrast(f64),
    #[error("conjugate gradients stalled after {iterations} iterations (relative residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct PcgSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PcgSettings {
    fn default() -> Self {
        PcgSettings { tol: 1e-12, max_iter: 50_000 }
    }
}

struct SymCsr {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SymCsr {
    fn mul(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.row_ptr.len() - 1 {
            y[r] = (self.row_ptr[r]..self.row_ptr[r + 1]).map(|k| self.vals[k] * x[self.cols[k]]).sum();
        }
    }
}

fn pcg(a: &SymCsr, diag: &[f64], b: &[f64], x: &mut [f64], s: &PcgSettings) -> Result<(), ScalarError> {
    let n = b.len();
    let dotv = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let mut r = vec![0.0; n];
    a.mul(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let bn = dotv(b, b).sqrt().max(f64::MIN_POSITIVE);
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(v, d)| v / d).collect();
    let mut p = z.clone();
    let mut rz = dotv(&r, &z);
    let mut q = vec![0.0; n];
    let mut res = dotv(&r, &r).sqrt() / bn;
    for _ in 0..s.max_iter {
        if res <= s.tol {
            return Ok(());
        }
        a.mul(&p, &mut q);
        let alpha = rz / dotv(&p, &q);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        res = dotv(&r, &r).sqrt() / bn;
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dotv(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if res <= s.tol {
        Ok(())
    } else {
        Err(ScalarError::NonConvergence { iterations: s.max_iter, residual: res })
    }
}

/// T(k) of the object region of `mesh`.
pub fn polya_szego(mesh: &TetMesh, contrast: f64, settings: &PcgSettings) -> Result<Mat3, ScalarError> {
    if !(contrast.is_finite() && contrast >= 0.0) {
        return Err(ScalarError::InvalidContrast(contrast));
    }
    let nv = mesh.vertices().len();
    // Dirichlet: truncation boundary; with k = 0 also vertices touching only object tets
    let mut fixed = vec![false; nv];
    for (f, tag) in mesh.faces() {
        if *tag == FaceTag::Far {
            for &v in f {
                fixed[v] = true;
            }
        }
    }
    let mut touches_exterior = vec![false; nv];
    for (t, tet) in mesh.tets().iter().enumerate() {
        if mesh.regions()[t] == Region::Exterior {
            for &v in tet {
                touches_exterior[v] = true;
            }
        }
    }
    let decoupled: Vec<bool> = (0..nv).map(|v| contrast == 0.0 && !touches_exterior[v]).collect();
    let mut index = vec![usize::MAX; nv];
    let mut n = 0;
    for v in 0..nv {
        if !fixed[v] && !decoupled[v] {
            index[v] = n;
            n += 1;
        }
    }

    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut rhs = vec![[0.0f64; 3]; n];
    for (t, tet) in mesh.tets().iter().enumerate() {
        let a = if mesh.regions()[t] == Region::Object { contrast } else { 1.0 };
        if a == 0.0 {
            continue;
        }
        let g = TetGeometry::of(mesh, t);
        for i in 0..4 {
            let gi = index[tet[i]];
            if gi == usize::MAX {
                continue;
            }
            for j in 0..4 {
                let kij = a * g.volume * dot(&g.grads[i], &g.grads[j]);
                let gj = index[tet[j]];
                if gj != usize::MAX {
                    rows[gi].push((gj, kij));
                } else if fixed[tet[j]] {
                    let x = mesh.vertices()[tet[j]];
                    for c in 0..3 {
                        rhs[gi][c] -= kij * x[c];
                    }
                }
            }
        }
    }
    let mut row_ptr = vec![0usize];
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut diag = vec![0.0; n];
    for (r, mut row) in rows.into_iter().enumerate() {
        row.sort_unstable_by_key(|e| e.0);
        let mut last = usize::MAX;
        for (c, v) in row {
            if c == last {
                *vals.last_mut().expect("entry exists") += v;
            } else {
                cols.push(c);
                vals.push(v);
                last = c;
            }
            if c == r {
                diag[r] += v;
            }
        }
        row_ptr.push(cols.len());
    }
    let a = SymCsr { row_ptr, cols, vals };

    let mut u = vec![[0.0f64; 3]; nv];
    for c in 0..3 {
        let b: Vec<f64> = rhs.iter().map(|r| r[c]).collect();
        // start from the background potential
        let mut x: Vec<f64> = (0..nv).filter(|&v| index[v] != usize::MAX).map(|v| mesh.vertices()[v][c]).collect();
        pcg(&a, &diag, &b, &mut x, settings)?;
        for v in 0..nv {
            u[v][c] = if index[v] != usize::MAX {
                x[index[v]]
            } else if fixed[v] {
                mesh.vertices()[v][c]
            } else {
                0.0
            };
        }
    }

    let mut t = [[0.0; 3]; 3];
    for face in mesh.interface() {
        for j in 0..3 {
            let mean = face.vertices.iter().map(|&v| u[v][j]).sum::<f64>() / 3.0;
            for i in 0..3 {
                t[i][j] += (contrast - 1.0) * face.area * mean * face.normal[i];
            }
        }
    }
    Ok(t)
}

/// Contrast used for canonical scaling: μ_r unless μ_r = 1, then 0.
pub fn canonical_contrast(mu_r: f64) -> f64 {
    if mu_r == 1.0 {
        0.0
    } else {
        mu_r
    }
}
