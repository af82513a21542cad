//! Edge-element solves of the θ transmission problems.
//!
//! Dimensionless weak form (lengths in units of α, fields in units of μ₀):
//!
//! ∫ μ_r⁻¹ ∇×θ·∇×v + ε∫ θ·v − iν ∫_B θ·v = ∫_B f·v − (1 − μ_r⁻¹) ∫_Γ (n×g)·v dS
//!
//! with n the outward normal of B, zero tangential trace on the truncation
//! boundary, and for θ_{J(p+1)}: f = iν Π_{J(p)}(ξ) e_j×ξ, g = (p+2) Π_{J(p)}(ξ) e_j.
//! The ε term acts in the exterior (and in B when ν = 0) and fixes the gradient
//! null space of the curl-curl operator.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use gmpt_core::linalg::{cross, Vec3};
use gmpt_core::tensor::{enumerate_multiindices, monomial, monomial_offsets, MultiIndex};
use gmpt_core::{DenseTensor, PolyField};
use num_complex::Complex64 as C64;
use sha2::{Digest, Sha256};

use crate::fem::{eval_curl, eval_field, local_dofs, TetGeometry};
use crate::mesh::{hex, MeshError, ObjectSpec, Region, TetMesh};
use crate::quadrature::{grundmann_moller, SimplexRule};

const REFINEMENT_STEPS: usize = 2;
const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("iterative solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("sparse factorization failed: {0}")]
    Factorization(String),
    #[error("missing θ solution for index {0}")]
    MissingIndex(MultiIndex),
    #[error("solve for index {index} failed: {source}")]
    Indexed { index: MultiIndex, source: Box<SolveError> },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("cache i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt cache file {path}: {reason}")]
    CacheCorrupt { path: PathBuf, reason: String },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    /// ε relative to the ratio of the largest stiffness and mass diagonal entries.
    pub eps_rel: f64,
    /// Relative residual target of the iterative path.
    pub tol: f64,
    pub max_iter: usize,
    /// Extra quadrature degree on top of the exact-integration default.
    pub quad_extra: usize,
    /// Free-dof count above which the Krylov path is used.
    pub direct_threshold: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { eps_rel: 1e-8, tol: 1e-10, max_iter: 500, quad_extra: 0, direct_threshold: 10_000 }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.eps_rel > 0.0 && self.tol > 0.0 && self.max_iter > 0 && self.direct_threshold > 0) {
            return Err(SolveError::InvalidConfig("all solver settings must be positive".into()));
        }
        Ok(())
    }

    /// key=value rendering recorded in provenance blocks.
    pub fn describe(&self) -> String {
        format!(
            "eps_rel={:e};tol={:e};max_iter={};quad_extra={};direct_threshold={}",
            self.eps_rel, self.tol, self.max_iter, self.quad_extra, self.direct_threshold
        )
    }

    fn key_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&self.eps_rel.to_le_bytes());
        v.extend_from_slice(&(self.quad_extra as u64).to_le_bytes());
        v
    }
}

/// Edge numbering restricted to dofs not on the truncation boundary, plus per-tet geometry.
#[derive(Debug)]
pub struct Discretization {
    pub mesh: Arc<TetMesh>,
    free: Vec<Option<usize>>,
    n_free: usize,
    geoms: Vec<TetGeometry>,
}

impl Discretization {
    pub fn new(mesh: Arc<TetMesh>) -> Self {
        let mut n_free = 0;
        let free = (0..mesh.edges().len())
            .map(|e| {
                (!mesh.is_far_edge(e)).then(|| {
                    n_free += 1;
                    n_free - 1
                })
            })
            .collect();
        let geoms = (0..mesh.tets().len()).map(|t| TetGeometry::of(&mesh, t)).collect();
        Discretization { mesh, free, n_free, geoms }
    }

    pub fn n_free(&self) -> usize {
        self.n_free
    }

    pub fn n_edges(&self) -> usize {
        self.free.len()
    }

    pub fn geometry(&self, t: usize) -> &TetGeometry {
        &self.geoms[t]
    }

    pub fn free_index(&self, edge: usize) -> Option<usize> {
        self.free[edge]
    }

    fn expand(&self, reduced: &[C64]) -> Vec<C64> {
        self.free.iter().map(|f| f.map_or(ZERO, |i| reduced[i])).collect()
    }
}

/// Compressed sparse rows, used for residuals and the Krylov path.
#[derive(Debug)]
struct Csr {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl Csr {
    fn from_triplets(n: usize, mut trip: Vec<(usize, usize, C64)>) -> Self {
        trip.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(trip.len());
        let mut vals: Vec<C64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            if last == Some((r, c)) {
                *vals.last_mut().expect("entry exists") += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Csr { n, row_ptr, cols, vals }
    }

    fn mul(&self, x: &[C64], y: &mut [C64]) {
        for r in 0..self.n {
            let mut acc = ZERO;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[r] = acc;
        }
    }
}

enum Backend {
    Direct(faer::sparse::linalg::solvers::Lu<usize, C64>),
    /// COCG preconditioned by the real SPD companion K + εM + νM_B.
    Krylov { chol: faer::sparse::linalg::solvers::Llt<usize, f64> },
}

/// Assembled and factorised system for one (mesh, ν, μ_r, ε).
pub struct TransmissionOperator {
    pub disc: Arc<Discretization>,
    pub nu: f64,
    pub mu_r: f64,
    pub eps: f64,
    pub cfg: SolveConfig,
    key: String,
    matrix: Csr,
    backend: Backend,
}

/// Hash identifying the discrete operator and load quadrature.
pub fn operator_key(mesh: &TetMesh, nu: f64, mu_r: f64, cfg: &SolveConfig) -> String {
    let mut h = Sha256::new();
    h.update(mesh.hash().as_bytes());
    h.update(nu.to_le_bytes());
    h.update(mu_r.to_le_bytes());
    h.update(cfg.key_bytes());
    hex(&h.finalize())
}

impl TransmissionOperator {
    pub fn new(spec: &ObjectSpec, cfg: &SolveConfig) -> Result<Self, SolveError> {
        Self::with_parameters(Arc::new(Discretization::new(spec.mesh.clone())), spec.nu(), spec.mu_r(), cfg)
    }

    pub fn with_parameters(
        disc: Arc<Discretization>,
        nu: f64,
        mu_r: f64,
        cfg: &SolveConfig,
    ) -> Result<Self, SolveError> {
        cfg.validate()?;
        let mesh = disc.mesh.clone();
        let n = disc.n_free();
        // ε from the largest element diagonals
        let (mut kmax, mut mmax) = (0.0f64, 0.0f64);
        let mut locals = Vec::with_capacity(mesh.tets().len());
        for t in 0..mesh.tets().len() {
            let g = disc.geometry(t);
            let (k, m) = (g.stiffness(), g.mass());
            let inv_mu = if mesh.regions()[t] == Region::Object { 1.0 / mu_r } else { 1.0 };
            for i in 0..6 {
                kmax = kmax.max(inv_mu * k[i][i]);
                mmax = mmax.max(m[i][i]);
            }
            locals.push((k, m, inv_mu));
        }
        let eps = cfg.eps_rel * kmax / mmax;
        let mut trip: Vec<(usize, usize, C64)> = Vec::with_capacity(36 * mesh.tets().len());
        let direct = n <= cfg.direct_threshold;
        let mut companion: Vec<Triplet<usize, usize, f64>> = Vec::new();
        for (t, (k, m, inv_mu)) in locals.iter().enumerate() {
            let mass_coeff = match mesh.regions()[t] {
                Region::Exterior => C64::new(eps, 0.0),
                Region::Object if nu == 0.0 => C64::new(eps, 0.0),
                Region::Object => C64::new(0.0, -nu),
            };
            let edges = mesh.tet_edges(t);
            for i in 0..6 {
                let Some(gi) = disc.free_index(edges[i]) else { continue };
                let si = mesh.edge_sign(t, i);
                for j in 0..6 {
                    let Some(gj) = disc.free_index(edges[j]) else { continue };
                    let sj = mesh.edge_sign(t, j);
                    let v = (C64::new(inv_mu * k[i][j], 0.0) + mass_coeff * m[i][j]) * (si * sj);
                    trip.push((gi, gj, v));
                    if !direct {
                        let c = inv_mu * k[i][j] + (mass_coeff.re + mass_coeff.im.abs()) * m[i][j];
                        companion.push(Triplet::new(gi, gj, c * si * sj));
                    }
                }
            }
        }
        let matrix = Csr::from_triplets(n, trip);
        let backend = if direct {
            let trips: Vec<Triplet<usize, usize, C64>> = (0..n)
                .flat_map(|r| {
                    let m = &matrix;
                    (m.row_ptr[r]..m.row_ptr[r + 1]).map(move |k| Triplet::new(r, m.cols[k], m.vals[k]))
                })
                .collect();
            let a = SparseColMat::<usize, C64>::try_new_from_triplets(n, n, &trips)
                .map_err(|e| SolveError::Factorization(format!("{e:?}")))?;
            let lu = a.sp_lu().map_err(|e| SolveError::Factorization(format!("{e:?}")))?;
            Backend::Direct(lu)
        } else {
            let p = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &companion)
                .map_err(|e| SolveError::Factorization(format!("{e:?}")))?;
            drop(companion);
            let chol = p.sp_cholesky(faer::Side::Lower).map_err(|e| SolveError::Factorization(format!("{e:?}")))?;
            Backend::Krylov { chol }
        };
        let key = operator_key(&mesh, nu, mu_r, cfg);
        Ok(TransmissionOperator { disc, nu, mu_r, eps, cfg: cfg.clone(), key, matrix, backend })
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn is_direct(&self) -> bool {
        matches!(self.backend, Backend::Direct(_))
    }

    /// Solves for several free-dof loads; returns full edge vectors and relative residuals.
    pub fn solve(&self, loads: &[Vec<C64>]) -> Result<Vec<(Vec<C64>, f64)>, SolveError> {
        let n = self.disc.n_free();
        let reduced: Vec<Vec<C64>> = match &self.backend {
            Backend::Direct(lu) => {
                if loads.is_empty() {
                    return Ok(Vec::new());
                }
                let b = faer::Mat::<C64>::from_fn(n, loads.len(), |i, j| loads[j][i]);
                let x = lu.solve(&b);
                let mut xs: Vec<Vec<C64>> = (0..loads.len()).map(|j| (0..n).map(|i| x[(i, j)]).collect()).collect();
                // iterative refinement against the ε-conditioned factorisation
                let mut ax = vec![ZERO; n];
                for _ in 0..REFINEMENT_STEPS {
                    let mut r = faer::Mat::<C64>::zeros(n, loads.len());
                    for (j, x) in xs.iter().enumerate() {
                        self.matrix.mul(x, &mut ax);
                        for i in 0..n {
                            r[(i, j)] = loads[j][i] - ax[i];
                        }
                    }
                    let d = lu.solve(&r);
                    for (j, x) in xs.iter_mut().enumerate() {
                        for i in 0..n {
                            x[i] += d[(i, j)];
                        }
                    }
                }
                xs
            }
            Backend::Krylov { chol } => self.cocg(loads, chol)?,
        };
        Ok(reduced
            .into_iter()
            .zip(loads)
            .map(|(x, b)| {
                let res = self.relative_residual(&x, b);
                (self.disc.expand(&x), res)
            })
            .collect())
    }

    fn relative_residual(&self, x: &[C64], b: &[C64]) -> f64 {
        let mut ax = vec![ZERO; x.len()];
        self.matrix.mul(x, &mut ax);
        let bn: f64 = b.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let rn: f64 = ax.iter().zip(b).map(|(a, b)| (b - a).norm_sqr()).sum::<f64>().sqrt();
        if bn > 0.0 {
            rn / bn
        } else {
            rn
        }
    }

    /// Conjugate orthogonal conjugate gradients for the complex-symmetric
    /// system, all right-hand sides advanced together so each preconditioner
    /// application is one multi-column triangular solve.
    fn cocg(
        &self,
        loads: &[Vec<C64>],
        chol: &faer::sparse::linalg::solvers::Llt<usize, f64>,
    ) -> Result<Vec<Vec<C64>>, SolveError> {
        let n = self.disc.n_free();
        let nb = loads.len();
        let precondition = |rs: &[&Vec<C64>]| -> Vec<Vec<C64>> {
            let rhs = faer::Mat::<f64>::from_fn(n, 2 * rs.len(), |i, c| {
                let v = rs[c / 2][i];
                if c % 2 == 0 {
                    v.re
                } else {
                    v.im
                }
            });
            let z = chol.solve(&rhs);
            (0..rs.len()).map(|k| (0..n).map(|i| C64::new(z[(i, 2 * k)], z[(i, 2 * k + 1)])).collect()).collect()
        };
        let bdot = |u: &[C64], v: &[C64]| -> C64 { u.iter().zip(v).map(|(a, b)| a * b).sum() };
        let norm = |u: &[C64]| u.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let bn: Vec<f64> = loads.iter().map(|b| norm(b)).collect();
        let mut x = vec![vec![ZERO; n]; nb];
        let mut r: Vec<Vec<C64>> = loads.to_vec();
        let mut z = precondition(&r.iter().collect::<Vec<_>>());
        let mut p = z.clone();
        let mut rho: Vec<C64> = (0..nb).map(|k| bdot(&r[k], &z[k])).collect();
        let mut res: Vec<f64> = (0..nb).map(|k| if bn[k] > 0.0 { 1.0 } else { 0.0 }).collect();
        let mut active: Vec<usize> = (0..nb).filter(|&k| bn[k] > 0.0).collect();
        let mut q = vec![ZERO; n];
        for _ in 0..self.cfg.max_iter {
            if active.is_empty() {
                return Ok(x);
            }
            for &k in &active {
                self.matrix.mul(&p[k], &mut q);
                let mu = bdot(&p[k], &q);
                if mu.norm() == 0.0 {
                    return Err(SolveError::NonConvergence { iterations: 0, residual: res[k] });
                }
                let alpha = rho[k] / mu;
                for i in 0..n {
                    x[k][i] += alpha * p[k][i];
                    r[k][i] -= alpha * q[i];
                }
                res[k] = norm(&r[k]) / bn[k];
            }
            active.retain(|&k| res[k] > self.cfg.tol);
            if active.is_empty() {
                return Ok(x);
            }
            let zs = precondition(&active.iter().map(|&k| &r[k]).collect::<Vec<_>>());
            for (&k, zk) in active.iter().zip(zs) {
                z[k] = zk;
                let rho_new = bdot(&r[k], &z[k]);
                let beta = rho_new / rho[k];
                rho[k] = rho_new;
                for i in 0..n {
                    p[k][i] = z[k][i] + beta * p[k][i];
                }
            }
        }
        if active.is_empty() {
            return Ok(x);
        }
        let worst = active.iter().map(|&k| res[k]).fold(0.0, f64::max);
        Err(SolveError::NonConvergence { iterations: self.cfg.max_iter, residual: worst })
    }

    /// Free-dof load ∫_B f·v − (1 − μ_r⁻¹)∫_Γ (n×g)·v dS with rules exact to the given degrees.
    pub fn load(
        &self,
        f: &dyn Fn(&Vec3) -> [C64; 3],
        g: &dyn Fn(&Vec3) -> [C64; 3],
        volume_degree: usize,
        surface_degree: usize,
    ) -> Vec<C64> {
        let mut out = vec![ZERO; self.disc.n_free()];
        let vol = volume_load(&self.disc, f, volume_degree);
        let surf = interface_load(&self.disc, g, surface_degree);
        let jump = 1.0 - 1.0 / self.mu_r;
        for e in 0..self.disc.n_edges() {
            if let Some(i) = self.disc.free_index(e) {
                out[i] = vol[e] - surf[e] * jump;
            }
        }
        out
    }

    /// Load of the θ_J problem.
    pub fn theta_load(&self, j: &MultiIndex) -> Vec<C64> {
        let p = j.len() - 1;
        let head = j.head().expect("non-empty index") as usize - 1;
        let tail = j.tail();
        let nu = self.nu;
        let f = move |xi: &Vec3| -> [C64; 3] {
            let mut e = [0.0; 3];
            e[head] = 1.0;
            let c = cross(&e, xi);
            let w = nu * monomial(xi, &tail);
            c.map(|v| C64::new(0.0, w * v))
        };
        let tail2 = j.tail();
        let g = move |xi: &Vec3| -> [C64; 3] {
            let mut out = [ZERO; 3];
            out[head] = C64::new((p + 2) as f64 * monomial(xi, &tail2), 0.0);
            out
        };
        let extra = self.cfg.quad_extra;
        self.load(&f, &g, p + 2 + extra, p + 2 + extra)
    }
}

fn volume_load(disc: &Discretization, f: &dyn Fn(&Vec3) -> [C64; 3], degree: usize) -> Vec<C64> {
    let mesh = &disc.mesh;
    let rule = grundmann_moller(3, degree);
    let mut out = vec![ZERO; disc.n_edges()];
    for t in mesh.object_tets() {
        let g = disc.geometry(t);
        let edges = mesh.tet_edges(t);
        let mut local = [ZERO; 6];
        for (lam, w) in rule.points.iter().zip(&rule.weights) {
            let fx = f(&g.point(lam));
            for (n, slot) in local.iter_mut().enumerate() {
                let b = g.basis(n, lam);
                *slot += (fx[0] * b[0] + fx[1] * b[1] + fx[2] * b[2]) * (w * g.volume);
            }
        }
        for n in 0..6 {
            out[edges[n]] += local[n] * mesh.edge_sign(t, n);
        }
    }
    out
}

/// ∫_Γ (n×g)·w_e dS per edge.
fn interface_load(disc: &Discretization, g: &dyn Fn(&Vec3) -> [C64; 3], degree: usize) -> Vec<C64> {
    let mesh = &disc.mesh;
    let rule = grundmann_moller(2, degree);
    let mut out = vec![ZERO; disc.n_edges()];
    for face in mesh.interface() {
        let t = face.object_tet;
        let geom = disc.geometry(t);
        let tet = mesh.tets()[t];
        let local_of = |v: usize| tet.iter().position(|&u| u == v).expect("face vertex in tet");
        let slots = face.vertices.map(local_of);
        let edges = mesh.tet_edges(t);
        let mut local = [ZERO; 6];
        for (mu, w) in rule.points.iter().zip(&rule.weights) {
            let mut lam = [0.0; 4];
            for k in 0..3 {
                lam[slots[k]] = mu[k];
            }
            let x = geom.point(&lam);
            let gx = g(&x);
            let n = face.normal;
            let nxg = [
                gx[2] * n[1] - gx[1] * n[2],
                gx[0] * n[2] - gx[2] * n[0],
                gx[1] * n[0] - gx[0] * n[1],
            ];
            for (k, slot) in local.iter_mut().enumerate() {
                let b = geom.basis(k, &lam);
                *slot += (nxg[0] * b[0] + nxg[1] * b[1] + nxg[2] * b[2]) * (w * face.area);
            }
        }
        for k in 0..6 {
            out[edges[k]] += local[k] * mesh.edge_sign(t, k);
        }
    }
    out
}

/// Discrete θ_{J(p+1)}.
#[derive(Debug, Clone)]
pub struct ThetaSolution {
    pub index: MultiIndex,
    pub dofs: Vec<C64>,
    pub residual: f64,
    pub key: String,
    pub nu: f64,
    pub mu_r: f64,
    disc: Arc<Discretization>,
}

impl ThetaSolution {
    pub fn discretization(&self) -> &Arc<Discretization> {
        &self.disc
    }

    pub fn mesh(&self) -> &TetMesh {
        &self.disc.mesh
    }

    pub fn local(&self, t: usize) -> [C64; 6] {
        local_dofs(&self.disc.mesh, &self.dofs, t)
    }

    pub fn field(&self, t: usize, lambda: &[f64]) -> [C64; 3] {
        eval_field(self.disc.geometry(t), &self.local(t), lambda)
    }

    pub fn curl(&self, t: usize) -> [C64; 3] {
        eval_curl(self.disc.geometry(t), &self.local(t))
    }

    /// Curl per tet.
    pub fn curl_field(&self) -> Vec<[C64; 3]> {
        (0..self.disc.mesh.tets().len()).map(|t| self.curl(t)).collect()
    }
}

/// Which quantity multiplies Π_K(ξ) in [`volume_moment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentKind {
    Field,
    Curl,
    Cross,
}

/// ∫_B Π_K(ξ) X dξ with X = θ, ∇×θ or ξ×θ, by quadrature exact for the integrand plus `extra`.
pub fn volume_moment(theta: &ThetaSolution, k: &MultiIndex, kind: MomentKind, extra: usize) -> DenseTensor {
    let degree = k.len() + 2 + extra;
    let rule = grundmann_moller(3, degree);
    let mesh = theta.mesh();
    let mut acc = [ZERO; 3];
    for t in mesh.object_tets() {
        let g = theta.disc.geometry(t);
        let local = theta.local(t);
        let curl = eval_curl(g, &local);
        for (lam, w) in rule.points.iter().zip(&rule.weights) {
            let xi = g.point(lam);
            let weight = w * g.volume * monomial(&xi, k);
            let v = match kind {
                MomentKind::Field => eval_field(g, &local, lam),
                MomentKind::Curl => curl,
                MomentKind::Cross => cross_rc(&xi, &eval_field(g, &local, lam)),
            };
            for i in 0..3 {
                acc[i] += v[i] * weight;
            }
        }
    }
    DenseTensor::vector(acc)
}

/// ∫_B Π_K(ξ) X dξ for the analytic part t = Π_{J(p)}(ξ) e_j×ξ (Field/Cross) or
/// Π_{J(p)}(ξ) e_j (Curl slot reused for the plain monomial vector).
pub fn source_moment(mesh: &TetMesh, j: &MultiIndex, k: &MultiIndex, kind: MomentKind, extra: usize) -> DenseTensor {
    let head = j.head().expect("non-empty index") as usize - 1;
    let tail = j.tail();
    let degree = k.len() + j.len() + 2 + extra;
    let rule = grundmann_moller(3, degree);
    let mut acc = [ZERO; 3];
    let mut e = [0.0; 3];
    e[head] = 1.0;
    for t in mesh.object_tets() {
        let g = TetGeometry::of(mesh, t);
        for (lam, w) in rule.points.iter().zip(&rule.weights) {
            let xi = g.point(lam);
            let weight = w * g.volume * monomial(&xi, k) * monomial(&xi, &tail);
            let v = match kind {
                MomentKind::Field => cross(&e, &xi),
                MomentKind::Cross => cross(&xi, &cross(&e, &xi)),
                MomentKind::Curl => e,
            };
            for i in 0..3 {
                acc[i] += C64::new(v[i] * weight, 0.0);
            }
        }
    }
    DenseTensor::vector(acc)
}

fn cross_rc(a: &Vec3, b: &[C64; 3]) -> [C64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// All θ_{J(p+1)} for p ≤ max_p on one operator.
#[derive(Debug, Clone)]
pub struct ThetaSet {
    pub max_p: usize,
    pub nu: f64,
    pub mu_r: f64,
    pub key: String,
    pub disc: Arc<Discretization>,
    pub solutions: BTreeMap<MultiIndex, ThetaSolution>,
    /// How many solutions were read from the cache rather than solved.
    pub from_cache: usize,
}

impl ThetaSet {
    pub fn get(&self, j: &MultiIndex) -> Result<&ThetaSolution, SolveError> {
        self.solutions.get(j).ok_or_else(|| SolveError::MissingIndex(j.clone()))
    }

    pub fn max_residual(&self) -> f64 {
        self.solutions.values().map(|s| s.residual).fold(0.0, f64::max)
    }
}

/// Every J(p+1) with p ≤ max_p, ordered by length then lexicographically.
pub fn theta_indices(max_p: usize) -> Vec<MultiIndex> {
    (1..=max_p + 1).flat_map(enumerate_multiindices).collect()
}

pub fn solve_theta(spec: &ObjectSpec, j: &MultiIndex, cfg: &SolveConfig) -> Result<ThetaSolution, SolveError> {
    if j.is_empty() {
        return Err(SolveError::InvalidConfig("θ index must have at least one entry".into()));
    }
    let op = TransmissionOperator::new(spec, cfg)?;
    solve_indices(&op, std::slice::from_ref(j)).map(|mut v| v.remove(0))
}

fn solve_indices(op: &TransmissionOperator, indices: &[MultiIndex]) -> Result<Vec<ThetaSolution>, SolveError> {
    let loads: Vec<Vec<C64>> = indices.iter().map(|j| op.theta_load(j)).collect();
    let solved = op.solve(&loads).map_err(|e| SolveError::Indexed {
        index: indices.first().cloned().unwrap_or_default(),
        source: Box::new(e),
    })?;
    Ok(indices
        .iter()
        .zip(solved)
        .map(|(j, (dofs, residual))| ThetaSolution {
            index: j.clone(),
            dofs,
            residual,
            key: op.key().to_owned(),
            nu: op.nu,
            mu_r: op.mu_r,
            disc: op.disc.clone(),
        })
        .collect())
}

/// Solves all J(p+1), p ≤ max_p, with one factorisation; reuses cached solutions
/// when `cache` is given.
pub fn solve_batch(
    spec: &ObjectSpec,
    max_p: usize,
    cfg: &SolveConfig,
    cache: Option<&Path>,
) -> Result<ThetaSet, SolveError> {
    if max_p > gmpt_core::polyfield::DEFAULT_DEGREE_CAP {
        return Err(SolveError::InvalidConfig(format!("max_p {max_p} exceeds the degree cap")));
    }
    cfg.validate()?;
    let disc = Arc::new(Discretization::new(spec.mesh.clone()));
    let key = operator_key(&spec.mesh, spec.nu(), spec.mu_r(), cfg);
    let indices = theta_indices(max_p);
    let mut solutions = BTreeMap::new();
    let mut missing = Vec::new();
    for j in &indices {
        match cache.map(|dir| read_cached(dir, &key, j, &disc, (spec.nu(), spec.mu_r()))).transpose()?.flatten() {
            Some(sol) => {
                solutions.insert(j.clone(), sol);
            }
            None => missing.push(j.clone()),
        }
    }
    if !missing.is_empty() {
        let op = TransmissionOperator::with_parameters(disc.clone(), spec.nu(), spec.mu_r(), cfg)?;
        for sol in solve_indices(&op, &missing)? {
            if let Some(dir) = cache {
                write_cached(dir, &sol)?;
            }
            solutions.insert(sol.index.clone(), sol);
        }
    }
    let from_cache = indices.len() - missing.len();
    Ok(ThetaSet { max_p, nu: spec.nu(), mu_r: spec.mu_r(), key, disc, solutions, from_cache })
}

/// Reads all J(p+1), p ≤ max_p, from the cache without solving; a missing file is
/// reported as [`SolveError::MissingIndex`].
pub fn load_batch(spec: &ObjectSpec, max_p: usize, cfg: &SolveConfig, cache: &Path) -> Result<ThetaSet, SolveError> {
    cfg.validate()?;
    let disc = Arc::new(Discretization::new(spec.mesh.clone()));
    let key = operator_key(&spec.mesh, spec.nu(), spec.mu_r(), cfg);
    let mut solutions = BTreeMap::new();
    for j in theta_indices(max_p) {
        let sol = read_cached(cache, &key, &j, &disc, (spec.nu(), spec.mu_r()))?.ok_or_else(|| SolveError::MissingIndex(j.clone()))?;
        solutions.insert(j, sol);
    }
    let from_cache = solutions.len();
    Ok(ThetaSet { max_p, nu: spec.nu(), mu_r: spec.mu_r(), key, disc, solutions, from_cache })
}

/// Solves with explicit loads through an existing operator (used for the direct A_Δ oracle).
pub fn solve_general(
    op: &TransmissionOperator,
    f: &dyn Fn(&Vec3) -> [C64; 3],
    g: &dyn Fn(&Vec3) -> [C64; 3],
    degree: usize,
) -> Result<(Vec<C64>, f64), SolveError> {
    let load = op.load(f, g, degree, degree);
    Ok(op.solve(&[load])?.remove(0))
}

/// A_Δ dofs = Σ_p μ₀ α^p/(p!(p+2)) (D^p H₀(z))_{J(p+1)} θ_{J(p+1)}.
pub fn superpose_adelta(
    thetas: &ThetaSet,
    h0: &PolyField,
    spec: &ObjectSpec,
    degree: usize,
) -> Result<Vec<C64>, SolveError> {
    let mut out = vec![ZERO; thetas.disc.n_edges()];
    let mut fact = 1.0;
    for p in 0..=degree {
        if p > 0 {
            fact *= p as f64;
        }
        let block = h0.block(p);
        let w = spec.mu0 * spec.alpha.powi(p as i32) / (fact * (p + 2) as f64);
        for (n, j) in enumerate_multiindices(p + 1).iter().enumerate() {
            let c = block.data()[n] * w;
            if c == ZERO {
                continue;
            }
            let theta = thetas.get(j)?;
            for (o, v) in out.iter_mut().zip(&theta.dofs) {
                *o += c * v;
            }
        }
    }
    Ok(out)
}

/// Quadrature points over the object region shared by all moment evaluations.
#[derive(Debug, Clone)]
pub struct ObjectQuadrature {
    /// (tet, barycentric coordinates, ξ, weight × volume)
    pub points: Vec<(usize, [f64; 4], Vec3, f64)>,
    pub degree: usize,
}

impl ObjectQuadrature {
    pub fn new(mesh: &TetMesh, degree: usize) -> Self {
        let rule: SimplexRule = grundmann_moller(3, degree);
        let mut points = Vec::new();
        for t in mesh.object_tets() {
            let g = TetGeometry::of(mesh, t);
            for (lam, w) in rule.points.iter().zip(&rule.weights) {
                let l = [lam[0], lam[1], lam[2], lam[3]];
                points.push((t, l, g.point(lam), w * g.volume));
            }
        }
        ObjectQuadrature { points, degree: rule.degree }
    }

    /// θ and ∇×θ at every quadrature point.
    pub fn sample(&self, theta: &ThetaSolution) -> (Vec<[C64; 3]>, Vec<[C64; 3]>) {
        let mut field = Vec::with_capacity(self.points.len());
        let mut curl = Vec::with_capacity(self.points.len());
        let mut cached: Option<(usize, [C64; 6], [C64; 3])> = None;
        for (t, lam, _, _) in &self.points {
            let (local, c) = match cached {
                Some((ct, l, c)) if ct == *t => (l, c),
                _ => {
                    let l = theta.local(*t);
                    let c = eval_curl(theta.disc.geometry(*t), &l);
                    cached = Some((*t, l, c));
                    (l, c)
                }
            };
            field.push(eval_field(theta.disc.geometry(*t), &local, lam));
            curl.push(c);
        }
        (field, curl)
    }

    /// Π(ξ)_K at every point for all K of length m, row-major over K.
    pub fn monomials(&self, m: usize) -> Vec<Vec<f64>> {
        let ks = enumerate_multiindices(m);
        let offs: Vec<Vec<usize>> = ks.iter().map(|k| k.offsets().collect()).collect();
        self.points
            .iter()
            .map(|(_, _, xi, _)| offs.iter().map(|o| monomial_offsets(xi, o)).collect())
            .collect()
    }
}

const CACHE_MAGIC: &[u8; 10] = b"GMPTTHETA1";

fn cache_path(dir: &Path, key: &str, j: &MultiIndex) -> PathBuf {
    let label: String = j.entries().iter().map(|e| char::from(b'0' + e)).collect();
    dir.join(format!("theta_{}_{label}.bin", &key[..16]))
}

/// Binary layout: magic, 64-byte key, index length and entries, dof count (u64),
/// residual (f64), then (re, im) pairs, all little-endian.
fn write_cached(dir: &Path, sol: &ThetaSolution) -> Result<(), SolveError> {
    std::fs::create_dir_all(dir)?;
    let mut buf = Vec::with_capacity(100 + 16 * sol.dofs.len());
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(sol.key.as_bytes());
    buf.push(sol.index.len() as u8);
    buf.extend_from_slice(sol.index.entries());
    buf.extend_from_slice(&(sol.dofs.len() as u64).to_le_bytes());
    buf.extend_from_slice(&sol.residual.to_le_bytes());
    for v in &sol.dofs {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
    let path = cache_path(dir, &sol.key, &sol.index);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, buf)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// `Ok(None)` when no entry exists for this operator and index.
fn read_cached(
    dir: &Path,
    key: &str,
    j: &MultiIndex,
    disc: &Arc<Discretization>,
    (nu, mu_r): (f64, f64),
) -> Result<Option<ThetaSolution>, SolveError> {
    let path = cache_path(dir, key, j);
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let corrupt = |reason: &str| SolveError::CacheCorrupt { path: path.clone(), reason: reason.into() };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], SolveError> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| corrupt("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(CACHE_MAGIC.len())? != CACHE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    if take(64)? != key.as_bytes() {
        return Ok(None);
    }
    let len = take(1)?[0] as usize;
    if take(len)? != j.entries() {
        return Err(corrupt("index mismatch"));
    }
    let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    if n != disc.n_edges() {
        return Err(corrupt("dof count does not match the mesh"));
    }
    let residual = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let mut dofs = Vec::with_capacity(n);
    for _ in 0..n {
        let re = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let im = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        dofs.push(C64::new(re, im));
    }
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Some(ThetaSolution { index: j.clone(), dofs, residual, key: key.to_owned(), nu, mu_r, disc: disc.clone() }))
}
