//! Offline dictionary of canonical GMPT sets and the on-line fit of object position
//! and orientation used to rank dictionary entries against field measurements.
//!
//! The fit is nonlinear least squares: Σ_s w_s² |predicted(x_s; z, Q) − observed_s|²
//! with predicted values from the order-1 expansion of the entry rotated by Q and
//! placed at z. Orientation is searched over a fixed rotation grid and refined by
//! Levenberg–Marquardt on an axis-angle chart.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::Mat;
use gmpt_core::kernels::{green_hessian, KernelError};
use gmpt_core::linalg::{det, mat_mul, norm, rotation_from_vector, sub, transpose, Mat3, Vec3};
use gmpt_core::polyfield::{taylor_background, BackgroundModel};
use gmpt_core::PolyError;
use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::forward::{eval_expansion, ForwardError};
use crate::mesh::{canonicalize, hex, CanonicalTransform, MeshError, ObjectSpec, TetMesh};
use crate::polarizability::{polya_szego_tensor, set_from_thetas, GmptError, GmptSet};
use crate::transmission::{solve_batch, SolveConfig};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

pub const INDEX_FILE: &str = "index.json";
/// Angle of the local perturbations applied around each octahedral rotation.
pub const PERTURBATION_ANGLE: f64 = 0.4;
const FREQUENCY_RTOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum DictError {
    #[error("measurement set has no sensor readings")]
    EmptyMeasurement,
    #[error("dictionary has no entries")]
    EmptyDictionary,
    #[error("entry {id} has no GMPT set at frequency {frequency}")]
    FrequencyMismatch { id: String, frequency: f64 },
    #[error("entry {id} provides order {available}, {requested} requested")]
    OrderUnavailable { id: String, requested: usize, available: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Gmpt(#[from] GmptError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("integrity check failed for {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },
}

/// One object to be entered into the dictionary, in its own (arbitrary) frame.
#[derive(Debug, Clone)]
pub struct ObjectInput {
    pub id: String,
    pub mesh: Arc<TetMesh>,
    pub alpha: f64,
    pub sigma_star: f64,
    pub mu_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryProvenance {
    pub source_mesh_hash: String,
    pub mesh_hash: String,
    pub solver: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictEntry {
    pub id: String,
    pub spec_hash: String,
    /// Map from the input mesh frame to the canonical one.
    pub transform: CanonicalTransform,
    /// Canonical α (the physical object is unchanged by canonicalisation).
    pub alpha: f64,
    pub sigma_star: f64,
    pub mu_r: f64,
    /// Physical diameter α·diam(B).
    pub diameter: f64,
    pub frequencies: Vec<f64>,
    pub sets: Vec<GmptSet>,
    pub provenance: EntryProvenance,
}

impl DictEntry {
    pub fn order(&self) -> usize {
        self.sets.iter().map(GmptSet::order).min().unwrap_or(0)
    }

    pub fn set_at(&self, omega: f64) -> Option<&GmptSet> {
        self.frequencies
            .iter()
            .position(|&w| (w - omega).abs() <= FREQUENCY_RTOL * w.abs().max(omega.abs()))
            .map(|n| &self.sets[n])
    }

    fn lowest_frequency_set(&self) -> Option<&GmptSet> {
        let n = (0..self.frequencies.len()).min_by(|&a, &b| self.frequencies[a].total_cmp(&self.frequencies[b]))?;
        Some(&self.sets[n])
    }
}

fn spec_hash(spec: &ObjectSpec) -> String {
    let mut h = Sha256::new();
    h.update(spec.mesh.hash().as_bytes());
    for v in [spec.alpha, spec.sigma_star, spec.mu_r()] {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

/// Canonicalises the object, then solves and assembles an order-`order` set per frequency.
pub fn build_entry(
    input: &ObjectInput,
    frequencies: &[f64],
    order: usize,
    cfg: &SolveConfig,
    cache: Option<&Path>,
) -> Result<DictEntry, DictError> {
    if frequencies.is_empty() {
        return Err(DictError::InvalidInput("no frequencies given".into()));
    }
    if order == 0 {
        return Err(DictError::InvalidInput("order must be at least 1".into()));
    }
    if frequencies.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(DictError::InvalidInput("frequencies must be finite and non-negative".into()));
    }
    let t = polya_szego_tensor(&input.mesh, input.mu_r)?;
    let source = ObjectSpec::new(input.mesh.clone(), input.alpha, [0.0; 3], input.sigma_star, input.mu_r, frequencies[0])?;
    let (mut canon, transform) = canonicalize(&source, &t)?;
    canon.z = [0.0; 3];
    let mut sets = Vec::with_capacity(frequencies.len());
    for &omega in frequencies {
        let mut spec = canon.clone();
        spec.omega = omega;
        let thetas = solve_batch(&spec, order - 1, cfg, cache).map_err(GmptError::from)?;
        sets.push(set_from_thetas(&thetas, &spec, order)?);
    }
    Ok(DictEntry {
        id: input.id.clone(),
        spec_hash: spec_hash(&canon),
        transform,
        alpha: canon.alpha,
        sigma_star: canon.sigma_star,
        mu_r: canon.mu_r(),
        diameter: canon.alpha * canon.mesh.object_diameter(),
        frequencies: frequencies.to_vec(),
        sets,
        provenance: EntryProvenance {
            source_mesh_hash: input.mesh.hash(),
            mesh_hash: canon.mesh.hash(),
            solver: cfg.describe(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
        },
    })
}

#[derive(Debug)]
pub struct DictionaryBuild {
    pub entries: Vec<DictEntry>,
    /// Entries that could not be built, with the reason; the rest of the build continues.
    pub failures: Vec<(String, DictError)>,
}

/// Entries come out in input order.
pub fn build_dictionary(
    inputs: &[ObjectInput],
    frequencies: &[f64],
    order: usize,
    cfg: &SolveConfig,
    cache: Option<&Path>,
) -> DictionaryBuild {
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    let mut seen = BTreeSet::new();
    for input in inputs {
        if !seen.insert(input.id.clone()) {
            failures.push((input.id.clone(), DictError::InvalidInput(format!("duplicate id {}", input.id))));
            continue;
        }
        match build_entry(input, frequencies, order, cfg, cache) {
            Ok(e) => entries.push(e),
            Err(e) => failures.push((input.id.clone(), e)),
        }
    }
    DictionaryBuild { entries, failures }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub x: Vec3,
    pub observed: [C64; 3],
    /// Noise standard deviation of this sensor; readings are weighted by its inverse.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub frequency: f64,
    pub background: BackgroundModel,
    /// Estimated noise level of the observations.
    #[serde(default)]
    pub noise: f64,
    pub readings: Vec<Reading>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FitFlags {
    /// Not more real equations than unknowns.
    pub ill_posed: bool,
    /// All observations vanish.
    pub degenerate: bool,
    /// The local optimiser hit its iteration limit; the best point found is returned.
    pub no_convergence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub z: Vec3,
    pub q: Mat3,
    /// Σ_s w_s² |predicted − observed|² at the optimum.
    pub residual: f64,
    /// sqrt(residual / Σ_s w_s² |observed|²), absent when all observations vanish.
    pub relative_residual: Option<f64>,
    pub order: usize,
    pub flags: FitFlags,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Starting position; found by a grid search with a free symmetric tensor when absent.
    pub z_init: Option<Vec3>,
    /// Expansion order of the refinement stage; 1 skips refinement.
    pub refine_order: usize,
    /// Number of best grid rotations refined in all six parameters.
    pub candidates: usize,
    pub max_iter: usize,
    /// Iterations of the position-only fit done for every grid rotation.
    pub coarse_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { z_init: None, refine_order: 1, candidates: 8, max_iter: 200, coarse_iter: 4 }
    }
}

fn signed_permutations() -> Vec<Mat3> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::new();
    for p in perms {
        for s in 0..8 {
            let mut q = [[0.0; 3]; 3];
            for (r, &c) in p.iter().enumerate() {
                q[r][c] = if s >> r & 1 == 1 { -1.0 } else { 1.0 };
            }
            if det(&q) > 0.0 {
                out.push(q);
            }
        }
    }
    out
}

/// 24 rotations of the cube.
pub fn octahedral_group() -> Vec<Mat3> {
    signed_permutations()
}

/// 576 rotations: each octahedral rotation preceded by the identity or one of 23
/// rotations by [`PERTURBATION_ANGLE`] about near-uniform axes.
pub fn rotation_grid() -> Vec<Mat3> {
    let n = 23;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut local = vec![rotation_from_vector(&[0.0; 3])];
    for k in 0..n {
        let y = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let phi = golden * k as f64;
        let axis = [r * phi.cos(), y, r * phi.sin()];
        local.push(rotation_from_vector(&axis.map(|c| c * PERTURBATION_ANGLE)));
    }
    let mut out = Vec::with_capacity(576);
    for g in octahedral_group() {
        for p in &local {
            out.push(mat_mul(&g, p));
        }
    }
    out
}

/// Angle of the rotation taking `a` to `b`.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let r = mat_mul(&transpose(a), b);
    let tr = r[0][0] + r[1][1] + r[2][2];
    ((tr - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

/// Q M Qᵀ for a complex 3×3 M.
fn rotate_matrix(q: &Mat3, m: &[[C64; 3]; 3]) -> [[C64; 3]; 3] {
    let mut out = [[ZERO; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = ZERO;
            for k in 0..3 {
                for l in 0..3 {
                    s += m[k][l] * (q[i][k] * q[j][l]);
                }
            }
            out[i][j] = s;
        }
    }
    out
}

fn hessian(x: &Vec3, z: &Vec3) -> Result<Mat3, KernelError> {
    let g = green_hessian(x, z)?;
    Ok(std::array::from_fn(|i| std::array::from_fn(|j| g.at(&[i, j]).re)))
}

/// Measurements paired with the entry set at their frequency.
struct Problem<'a> {
    data: Vec<(&'a Measurement, &'a GmptSet)>,
    mpt: Vec<[[C64; 3]; 3]>,
    order: usize,
}

impl<'a> Problem<'a> {
    fn new(measurements: &'a [Measurement], entry: &'a DictEntry, order: usize) -> Result<Self, DictError> {
        if measurements.is_empty() || measurements.iter().all(|m| m.readings.is_empty()) {
            return Err(DictError::EmptyMeasurement);
        }
        if order > entry.order() {
            return Err(DictError::OrderUnavailable { id: entry.id.clone(), requested: order, available: entry.order() });
        }
        let mut data = Vec::new();
        let mut mpt = Vec::new();
        for m in measurements {
            let set = entry
                .set_at(m.frequency)
                .ok_or_else(|| DictError::FrequencyMismatch { id: entry.id.clone(), frequency: m.frequency })?;
            let b = set.block(0, 0)?.combined();
            mpt.push(b.as_matrix().expect("rank two"));
            data.push((m, set));
        }
        Ok(Problem { data, mpt, order })
    }

    fn n_equations(&self) -> usize {
        6 * self.data.iter().map(|(m, _)| m.readings.len()).sum::<usize>()
    }

    /// Weighted residual vector (re, im interleaved per component).
    fn residual(&self, z: &Vec3, q: &Mat3) -> Result<Vec<f64>, DictError> {
        let mut out = Vec::with_capacity(self.n_equations());
        for (n, (meas, set)) in self.data.iter().enumerate() {
            let h0 = taylor_background(&meas.background, z, self.order - 1)?;
            if self.order == 1 {
                let mr = rotate_matrix(q, &self.mpt[n]);
                let h = h0.block(0).as_vector().expect("rank one");
                let mh: [C64; 3] = std::array::from_fn(|k| (0..3).map(|j| mr[k][j] * h[j]).sum());
                for r in &meas.readings {
                    let g = hessian(&r.x, z)?;
                    let w = r.sigma.map_or(1.0, |s| 1.0 / s);
                    for i in 0..3 {
                        let p: C64 = (0..3).map(|k| mh[k] * g[i][k]).sum();
                        let d = (p - r.observed[i]) * w;
                        out.push(d.re);
                        out.push(d.im);
                    }
                }
            } else {
                let rotated = set.transformed(q)?;
                for r in &meas.readings {
                    let p = eval_expansion(&rotated, &h0, z, &r.x, self.order)?.h;
                    let w = r.sigma.map_or(1.0, |s| 1.0 / s);
                    for i in 0..3 {
                        let d = (p[i] - r.observed[i]) * w;
                        out.push(d.re);
                        out.push(d.im);
                    }
                }
            }
        }
        Ok(out)
    }

    fn observed_norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|(m, _)| &m.readings)
            .map(|r| {
                let w = r.sigma.map_or(1.0, |s| 1.0 / s);
                r.observed.iter().map(|c| c.norm_sqr()).sum::<f64>() * w * w
            })
            .sum()
    }

    fn sensors(&self) -> Vec<Vec3> {
        self.data.iter().flat_map(|(m, _)| m.readings.iter().map(|r| r.x)).collect()
    }

    /// Residual with the best free symmetric tensor at z (variable projection).
    fn free_tensor_residual(&self, z: &Vec3) -> Result<Vec<f64>, DictError> {
        let basis: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];
        let mut rows: Vec<[f64; 12]> = Vec::new();
        let mut rhs = Vec::new();
        for (meas, _) in &self.data {
            let h = taylor_background(&meas.background, z, 0)?.block(0).as_vector().expect("rank one");
            for r in &meas.readings {
                let g = hessian(&r.x, z)?;
                let w = r.sigma.map_or(1.0, |s| 1.0 / s);
                for i in 0..3 {
                    let mut re = [0.0; 12];
                    let mut im = [0.0; 12];
                    for (u, &(k, l)) in basis.iter().enumerate() {
                        let mut a = g[i][k] * h[l];
                        if k != l {
                            a += g[i][l] * h[k];
                        }
                        let a = a * w;
                        re[u] = a.re;
                        re[u + 6] = -a.im;
                        im[u] = a.im;
                        im[u + 6] = a.re;
                    }
                    rows.push(re);
                    rows.push(im);
                    let o = r.observed[i] * w;
                    rhs.push(o.re);
                    rhs.push(o.im);
                }
            }
        }
        let mut ata = vec![vec![0.0; 12]; 12];
        let mut atb = vec![0.0; 12];
        for (row, b) in rows.iter().zip(&rhs) {
            for a in 0..12 {
                atb[a] += row[a] * b;
                for c in 0..12 {
                    ata[a][c] += row[a] * row[c];
                }
            }
        }
        let trace: f64 = (0..12).map(|a| ata[a][a]).sum();
        for (a, row) in ata.iter_mut().enumerate() {
            row[a] += 1e-12 * trace.max(f64::MIN_POSITIVE);
        }
        let c = solve_dense(&ata, &atb).unwrap_or_else(|| vec![0.0; 12]);
        Ok(rows
            .iter()
            .zip(&rhs)
            .map(|(row, b)| row.iter().zip(&c).map(|(a, x)| a * x).sum::<f64>() - b)
            .collect())
    }
}

fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let m = Mat::from_fn(n, n, |i, j| a[i][j]);
    let rhs = Mat::from_fn(n, 1, |i, _| b[i]);
    let x = m.partial_piv_lu().solve(&rhs);
    let out: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    out.iter().all(|v| v.is_finite()).then_some(out)
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

struct LmOutcome {
    x: Vec<f64>,
    cost: f64,
    converged: bool,
}

/// Levenberg–Marquardt with central-difference Jacobians; parameters are assumed O(1).
fn levenberg_marquardt(
    f: &dyn Fn(&[f64]) -> Result<Vec<f64>, DictError>,
    x0: &[f64],
    max_iter: usize,
) -> Result<LmOutcome, DictError> {
    const STEP: f64 = 1e-6;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = f(&x)?;
    let mut cost = sum_sq(&r);
    let mut lambda = 1e-3;
    for _ in 0..max_iter {
        if cost == 0.0 {
            return Ok(LmOutcome { x, cost, converged: true });
        }
        let mut jac = Vec::with_capacity(n);
        for k in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += STEP;
            xm[k] -= STEP;
            let (rp, rm) = (f(&xp)?, f(&xm)?);
            jac.push(rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * STEP)).collect::<Vec<f64>>());
        }
        let mut jtj = vec![vec![0.0; n]; n];
        let mut jtr = vec![0.0; n];
        for a in 0..n {
            jtr[a] = jac[a].iter().zip(&r).map(|(p, q)| p * q).sum();
            for b in a..n {
                let v: f64 = jac[a].iter().zip(&jac[b]).map(|(p, q)| p * q).sum();
                jtj[a][b] = v;
                jtj[b][a] = v;
            }
        }
        let grad = jtr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if grad <= 1e-14 * cost.max(f64::MIN_POSITIVE).sqrt() * jtj.iter().enumerate().map(|(a, row)| row[a]).sum::<f64>().sqrt() {
            return Ok(LmOutcome { x, cost, converged: true });
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = jtj.clone();
            for (a, row) in damped.iter_mut().enumerate() {
                row[a] += lambda * row[a].max(1e-12);
            }
            let Some(step) = solve_dense(&damped, &jtr.iter().map(|v| -v).collect::<Vec<_>>()) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
            match f(&trial) {
                Ok(rt) if sum_sq(&rt) < cost => {
                    let new_cost = sum_sq(&rt);
                    let small_step = step.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-10;
                    let small_gain = cost - new_cost <= 1e-14 * cost;
                    x = trial;
                    r = rt;
                    cost = new_cost;
                    lambda = (lambda * 0.3).max(1e-12);
                    improved = true;
                    if small_step || small_gain {
                        return Ok(LmOutcome { x, cost, converged: true });
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !improved {
            // no descent direction left at working precision
            return Ok(LmOutcome { x, cost, converged: true });
        }
    }
    Ok(LmOutcome { x, cost, converged: false })
}

/// Grid search plus local refinement of z for a free symmetric tensor.
fn initial_position(problem: &Problem, length: f64, centre: &Vec3) -> Result<Vec3, DictError> {
    let sensors = problem.sensors();
    let mut lo = sensors[0];
    let mut hi = sensors[0];
    for s in &sensors {
        for c in 0..3 {
            lo[c] = lo[c].min(s[c]);
            hi[c] = hi[c].max(s[c]);
        }
    }
    let n = 7;
    let mut best = (f64::INFINITY, *centre);
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let t = [a, b, c].map(|v| (v as f64 + 0.5) / n as f64);
                let z: Vec3 = std::array::from_fn(|d| {
                    let half = ((hi[d] - lo[d]) * 0.5).max(0.5 * length);
                    centre[d] + (2.0 * t[d] - 1.0) * half * 0.8
                });
                if sensors.iter().any(|s| norm(&sub(s, &z)) < 1e-6 * length) {
                    continue;
                }
                if let Ok(r) = problem.free_tensor_residual(&z) {
                    let cost = sum_sq(&r);
                    if cost < best.0 {
                        best = (cost, z);
                    }
                }
            }
        }
    }
    let z0 = best.1;
    let f = |p: &[f64]| problem.free_tensor_residual(&std::array::from_fn(|d| z0[d] + p[d] * length));
    let out = levenberg_marquardt(&f, &[0.0; 3], 50)?;
    Ok(std::array::from_fn(|d| z0[d] + out.x[d] * length))
}

/// Fits position and orientation of `entry` to the measurements; the position stage
/// uses the order-1 model, optionally followed by refinement at `opts.refine_order`.
pub fn fit_position(
    measurements: &[Measurement],
    entry: &DictEntry,
    grid: &[Mat3],
    opts: &FitOptions,
) -> Result<FitResult, DictError> {
    let problem = Problem::new(measurements, entry, 1)?;
    if grid.is_empty() {
        return Err(DictError::InvalidInput("empty rotation grid".into()));
    }
    let sensors = problem.sensors();
    let centre: Vec3 = std::array::from_fn(|d| sensors.iter().map(|s| s[d]).sum::<f64>() / sensors.len() as f64);
    let spread = sensors.iter().map(|s| norm(&sub(s, &centre))).fold(0.0, f64::max);
    let length = if spread > 0.0 { spread } else { entry.diameter.max(f64::MIN_POSITIVE) * 10.0 };
    let z0 = match opts.z_init {
        Some(z) => z,
        None => initial_position(&problem, length, &centre)?,
    };
    let observed = problem.observed_norm();
    let flags = FitFlags {
        ill_posed: problem.n_equations() <= 6,
        degenerate: observed == 0.0,
        no_convergence: false,
    };

    let at = |z0: &Vec3, q0: &Mat3, p: &[f64]| -> (Vec3, Mat3) {
        let z = std::array::from_fn(|d| z0[d] + p[d] * length);
        let q = mat_mul(&rotation_from_vector(&[p[3], p[4], p[5]]), q0);
        (z, q)
    };

    // coarse stage: position-only fits for every grid rotation
    let mut scored: Vec<(f64, usize, Vec3)> = grid
        .par_iter()
        .enumerate()
        .map(|(n, q)| {
            let f = |p: &[f64]| problem.residual(&std::array::from_fn(|d| z0[d] + p[d] * length), q);
            let out = levenberg_marquardt(&f, &[0.0; 3], opts.coarse_iter)?;
            let z = std::array::from_fn(|d| z0[d] + out.x[d] * length);
            Ok((out.cost, n, z))
        })
        .collect::<Result<_, DictError>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let refine = |z: Vec3, q: Mat3, problem: &Problem| -> Result<(Vec3, Mat3, f64, bool), DictError> {
        let f = |p: &[f64]| {
            let (z, q) = at(&z, &q, p);
            problem.residual(&z, &q)
        };
        let out = levenberg_marquardt(&f, &[0.0; 6], opts.max_iter)?;
        let (z, q) = at(&z, &q, &out.x);
        Ok((z, q, out.cost, out.converged))
    };

    let fine: Vec<(Vec3, Mat3, f64, bool)> = scored
        .iter()
        .take(opts.candidates.max(1))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(_, n, z)| refine(*z, grid[*n], &problem))
        .collect::<Result<_, DictError>>()?;
    let mut best = fine
        .into_iter()
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .expect("at least one candidate");
    let mut order = 1;
    if opts.refine_order > 1 {
        let higher = Problem::new(measurements, entry, opts.refine_order)?;
        best = refine(best.0, best.1, &higher)?;
        order = opts.refine_order;
    }
    let (z, q, residual, converged) = best;
    Ok(FitResult {
        z,
        q,
        residual,
        relative_residual: (observed > 0.0).then(|| (residual / observed).sqrt()),
        order,
        flags: FitFlags { no_convergence: !converged, ..flags },
    })
}

/// Least-squares prediction error of the fitted pose for the entry scaled by s
/// (tensor × s³), using the entry's lowest frequency; golden-section search on ln s.
pub fn fit_scale(measurements: &[Measurement], entry: &DictEntry, fit: &FitResult) -> Result<(f64, f64), DictError> {
    let base = entry.lowest_frequency_set().ok_or(DictError::EmptyDictionary)?;
    let m = base.block(0, 0)?.combined().as_matrix().expect("rank two");
    let mr = rotate_matrix(&fit.q, &m);
    let mut pairs = Vec::new();
    for meas in measurements {
        let h = taylor_background(&meas.background, &fit.z, 0)?.block(0).as_vector().expect("rank one");
        let mh: [C64; 3] = std::array::from_fn(|k| (0..3).map(|j| mr[k][j] * h[j]).sum());
        for r in &meas.readings {
            let g = hessian(&r.x, &fit.z)?;
            let w = r.sigma.map_or(1.0, |s| 1.0 / s);
            for i in 0..3 {
                let p: C64 = (0..3).map(|k| mh[k] * g[i][k]).sum();
                pairs.push((p * w, r.observed[i] * w));
            }
        }
    }
    if pairs.is_empty() {
        return Err(DictError::EmptyMeasurement);
    }
    let cost = |ls: f64| {
        let s3 = (3.0 * ls).exp();
        pairs.iter().map(|(p, o)| (p * s3 - o).norm_sqr()).sum::<f64>()
    };
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (-(4f64.ln()), 4f64.ln());
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    for _ in 0..100 {
        if cost(c) < cost(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - ratio * (b - a);
        d = a + ratio * (b - a);
    }
    let ls = 0.5 * (a + b);
    Ok((ls.exp(), cost(ls)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub fit: FitResult,
}

#[derive(Debug)]
pub struct Classification {
    /// Ascending residual, ties broken by id.
    pub ranking: Vec<Candidate>,
    pub failures: Vec<(String, DictError)>,
}

/// Fits every entry (concurrently) and ranks them by residual.
pub fn classify(
    measurements: &[Measurement],
    dictionary: &[DictEntry],
    opts: &FitOptions,
) -> Result<Classification, DictError> {
    if dictionary.is_empty() {
        return Err(DictError::EmptyDictionary);
    }
    if measurements.is_empty() || measurements.iter().all(|m| m.readings.is_empty()) {
        return Err(DictError::EmptyMeasurement);
    }
    let grid = rotation_grid();
    let results: Vec<(String, Result<FitResult, DictError>)> = dictionary
        .par_iter()
        .map(|e| {
            let fit = fit_position(measurements, e, &grid, &FitOptions { refine_order: opts.refine_order.min(e.order()), ..opts.clone() });
            (e.id.clone(), fit)
        })
        .collect();
    let mut ranking = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(fit) => ranking.push(Candidate { id, fit }),
            Err(e) => failures.push((id, e)),
        }
    }
    ranking.sort_by(|a, b| a.fit.residual.total_cmp(&b.fit.residual).then_with(|| a.id.cmp(&b.id)));
    failures.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(Classification { ranking, failures })
}

/// Perturbation predicted by the entry placed at z with orientation q.
pub fn predict(
    entry: &DictEntry,
    frequency: f64,
    background: &BackgroundModel,
    z: &Vec3,
    q: &Mat3,
    x: &Vec3,
    order: usize,
) -> Result<[C64; 3], DictError> {
    let set = entry
        .set_at(frequency)
        .ok_or_else(|| DictError::FrequencyMismatch { id: entry.id.clone(), frequency })?;
    let h0 = taylor_background(background, z, order.max(1) - 1)?;
    Ok(eval_expansion(&set.transformed(q)?, &h0, z, x, order)?.h)
}

/// Planted measurement: entry predictions plus Gaussian noise of standard deviation
/// `noise_rel` × (RMS predicted component magnitude) on real and imaginary parts.
#[allow(clippy::too_many_arguments)]
pub fn synthesize(
    entry: &DictEntry,
    frequency: f64,
    background: &BackgroundModel,
    sensors: &[Vec3],
    z: &Vec3,
    q: &Mat3,
    order: usize,
    noise_rel: f64,
    seed: u64,
) -> Result<Measurement, DictError> {
    let clean = sensors
        .iter()
        .map(|x| predict(entry, frequency, background, z, q, x, order))
        .collect::<Result<Vec<_>, _>>()?;
    let count = (3 * clean.len()).max(1) as f64;
    let rms = (clean.iter().flatten().map(|c| c.norm_sqr()).sum::<f64>() / count).sqrt();
    let sigma = noise_rel * rms;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let readings = sensors
        .iter()
        .zip(clean)
        .map(|(x, p)| {
            let observed = p.map(|c| c + C64::new(normal.sample(&mut rng), normal.sample(&mut rng)) * sigma);
            Reading { x: *x, observed, sigma: None }
        })
        .collect();
    Ok(Measurement { frequency, background: background.clone(), noise: sigma, readings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexItem {
    id: String,
    file: String,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexFile {
    version: String,
    entries: Vec<IndexItem>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn file_stem(n: usize, id: &str) -> String {
    let clean: String = id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("entry_{n:03}_{clean}.json")
}

/// Writes one JSON file per entry plus an index holding their SHA-256 digests.
pub fn save_dictionary(dir: &Path, entries: &[DictEntry]) -> Result<(), DictError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DictError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut items = Vec::new();
    for (n, e) in entries.iter().enumerate() {
        let file = file_stem(n, &e.id);
        let path = dir.join(&file);
        let text = serde_json::to_string_pretty(e).map_err(|source| DictError::Json { path: path.clone(), source })?;
        std::fs::write(&path, text.as_bytes()).map_err(io(&path))?;
        items.push(IndexItem { id: e.id.clone(), file, sha256: sha256_hex(text.as_bytes()) });
    }
    let index = IndexFile { version: env!("CARGO_PKG_VERSION").to_owned(), entries: items };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).map_err(|source| DictError::Json { path: path.clone(), source })?;
    std::fs::write(&path, text).map_err(io(&path))?;
    Ok(())
}

/// Reads a dictionary directory, refusing any entry whose digest does not match the index.
pub fn load_dictionary(dir: &Path) -> Result<Vec<DictEntry>, DictError> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|source| DictError::Io { path: path.clone(), source })?;
    let index: IndexFile = serde_json::from_str(&text).map_err(|source| DictError::Json { path: path.clone(), source })?;
    let mut out = Vec::new();
    for item in index.entries {
        if item.file.contains(['/', '\\']) || item.file.starts_with('.') {
            return Err(DictError::Integrity { path: path.clone(), reason: format!("bad file name {}", item.file) });
        }
        let p = dir.join(&item.file);
        let bytes = std::fs::read(&p).map_err(|source| DictError::Io { path: p.clone(), source })?;
        let digest = sha256_hex(&bytes);
        if digest != item.sha256 {
            return Err(DictError::Integrity { path: p, reason: format!("digest {digest} does not match index") });
        }
        let entry: DictEntry = serde_json::from_slice(&bytes).map_err(|source| DictError::Json { path: p.clone(), source })?;
        if entry.id != item.id {
            return Err(DictError::Integrity { path: p, reason: format!("id {} does not match index id {}", entry.id, item.id) });
        }
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_576_proper_rotations() {
        let g = rotation_grid();
        assert_eq!(g.len(), 576);
        for q in &g {
            assert!((det(q) - 1.0).abs() < 1e-12);
            assert!(gmpt_core::linalg::orthogonality_defect(q) < 1e-12);
        }
        assert_eq!(octahedral_group().len(), 24);
    }

    #[test]
    fn octahedral_group_is_closed() {
        let g = octahedral_group();
        for a in &g {
            for b in &g {
                let c = mat_mul(a, b);
                assert!(g.iter().any(|d| rotation_angle_between(d, &c) < 1e-9));
            }
        }
    }

    #[test]
    fn lm_solves_a_small_nonlinear_fit() {
        // y = a e^{b t}
        let ts: Vec<f64> = (0..10).map(|k| k as f64 * 0.1).collect();
        let f = |p: &[f64]| -> Result<Vec<f64>, DictError> {
            Ok(ts.iter().map(|t| p[0] * (p[1] * t).exp() - 2.0 * (-0.7 * t).exp()).collect())
        };
        let out = levenberg_marquardt(&f, &[1.0, 0.0], 100).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 2.0).abs() < 1e-7 && (out.x[1] + 0.7).abs() < 1e-7);
    }

    #[test]
    fn rotation_angle_of_axis_rotation() {
        let q = rotation_from_vector(&[0.0, 0.0, 0.3]);
        let i = rotation_from_vector(&[0.0; 3]);
        assert!((rotation_angle_between(&i, &q) - 0.3).abs() < 1e-12);
    }
}
