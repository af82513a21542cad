//! Assembly of the generalised polarizability blocks M̌̌ = −Č + 𝔑 from θ solutions.
//!
//! Block (m, p) is a tensor of rank 2+m+p with slots [k, K(m), j, J(p)]:
//!
//! Č = −iν α^{3+m+p} (−1)^m / (2 (m+1)! p! (p+2)) e_k·∫_B ξ × (Π_K (θ_J + Π_{J(p)} e_j×ξ))
//! 𝔑 = (1 − μ_r⁻¹) α^{3+m+p} (−1)^m / (p! m!) e_k·∫_B Π_K ((p+2)⁻¹ ∇×θ_J + Π_{J(p)} e_j)
//!
//! The rank 4+m+p array 𝔄 with slots [i, ℓ, k, K(m), j, J(p)] is assembled only
//! for auditing the two ε-reductions back to Č.

use std::collections::BTreeMap;

use gmpt_core::linalg::{cross, Mat3};
use gmpt_core::tensor::{enumerate_multiindices, MultiIndex, TensorError};
use gmpt_core::DenseTensor;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::mesh::{ObjectSpec, TetMesh};
use crate::scalar::{self, PcgSettings, ScalarError};
use crate::transmission::{solve_batch, ObjectQuadrature, SolveConfig, SolveError, ThetaSet};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Neumaier-compensated sum of complex terms, so that quadrature over many
/// elements does not depend on accumulation order beyond a few ulps.
#[derive(Debug, Clone, Copy, Default)]
struct Sum {
    re: (f64, f64),
    im: (f64, f64),
}

fn neumaier((s, c): (f64, f64), x: f64) -> (f64, f64) {
    let t = s + x;
    let c = if s.abs() >= x.abs() { c + ((s - t) + x) } else { c + ((x - t) + s) };
    (t, c)
}

impl Sum {
    fn add(&mut self, v: C64) {
        self.re = neumaier(self.re, v.re);
        self.im = neumaier(self.im, v.im);
    }

    fn value(&self) -> C64 {
        C64::new(self.re.0 + self.re.1, self.im.0 + self.im.1)
    }
}

/// Largest accepted relative (i,k) skew defect of 𝔄 before reduction.
pub const SKEW_TOL: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum GmptError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Scalar(#[from] ScalarError),
    #[error("array is not skew in the contracted slots (relative defect {defect:.3e})")]
    NotSkew { defect: f64 },
    #[error("expansion order must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("θ solutions only reach p = {available}, block needs p = {needed}")]
    OrderTooHigh { needed: usize, available: usize },
    #[error("block ({m},{p}) not present in the set")]
    MissingBlock { m: usize, p: usize },
    #[error("block ({m},{p}): {source}")]
    Block { m: usize, p: usize, source: Box<GmptError> },
}

/// Switches for auditing; the defaults give the tensors of the expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssemblyOptions {
    /// Apply the (−1)^m factor.
    pub alternating_sign: bool,
    /// Quadrature degree on top of the exact-integration default.
    pub quad_extra: usize,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        AssemblyOptions { alternating_sign: true, quad_extra: 0 }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn sign(m: usize, opts: &AssemblyOptions) -> f64 {
    if opts.alternating_sign && m % 2 == 1 {
        -1.0
    } else {
        1.0
    }
}

/// Prefactor of Č.
pub fn c_prefactor(nu: f64, alpha: f64, m: usize, p: usize, opts: &AssemblyOptions) -> C64 {
    let s = sign(m, opts) * alpha.powi((3 + m + p) as i32) / (2.0 * factorial(m + 1) * factorial(p) * (p + 2) as f64);
    C64::new(0.0, -nu * s)
}

/// Prefactor A(p, m) of 𝔄 and ℭ.
pub fn a_prefactor(nu: f64, alpha: f64, m: usize, p: usize, opts: &AssemblyOptions) -> C64 {
    c_prefactor(nu, alpha, m, p, opts) * 2.0
}

/// Prefactor of 𝔑.
pub fn n_prefactor(mu_r: f64, alpha: f64, m: usize, p: usize, opts: &AssemblyOptions) -> f64 {
    (1.0 - 1.0 / mu_r) * sign(m, opts) * alpha.powi((3 + m + p) as i32) / (factorial(p) * factorial(m))
}

/// Assembled arrays of one (m, p) block.
#[derive(Debug, Clone)]
pub struct BlockArrays {
    pub m: usize,
    pub p: usize,
    pub c: DenseTensor,
    pub n: DenseTensor,
    pub a: Option<DenseTensor>,
}

/// Offsets [k, K(m), j, J(p)] of a block entry.
fn block_offsets(k: usize, kk: &[usize], j: usize, jj: &[usize]) -> Vec<usize> {
    let mut o = Vec::with_capacity(2 + kk.len() + jj.len());
    o.push(k);
    o.extend_from_slice(kk);
    o.push(j);
    o.extend_from_slice(jj);
    o
}

/// Assembles every block with m + p ≤ order − 1 (or only `only`), sampling each θ once.
pub fn assemble_blocks(
    thetas: &ThetaSet,
    spec: &ObjectSpec,
    order: usize,
    only: Option<(usize, usize)>,
    with_a: bool,
    opts: &AssemblyOptions,
) -> Result<Vec<BlockArrays>, GmptError> {
    if order == 0 {
        return Err(GmptError::InvalidOrder(order));
    }
    let pairs: Vec<(usize, usize)> = match only {
        Some(mp) => vec![mp],
        None => (0..order).flat_map(|s| (0..=s).map(move |m| (m, s - m))).collect(),
    };
    let max_p = pairs.iter().map(|&(_, p)| p).max().unwrap_or(0);
    if max_p > thetas.max_p {
        return Err(GmptError::OrderTooHigh { needed: max_p, available: thetas.max_p });
    }
    let max_s = pairs.iter().map(|&(m, p)| m + p).max().unwrap_or(0);
    let quad = ObjectQuadrature::new(&thetas.disc.mesh, max_s + 3 + opts.quad_extra);
    let nu = thetas.nu;
    let mu_r = thetas.mu_r;
    let alpha = spec.alpha;

    let mut out = Vec::new();
    for &(m, p) in &pairs {
        let rank = 2 + m + p;
        let mut c = DenseTensor::zeros(rank);
        let mut n = DenseTensor::zeros(rank);
        let mut a = with_a.then(|| DenseTensor::zeros(rank + 2));
        let cp = c_prefactor(nu, alpha, m, p, opts);
        let ap = a_prefactor(nu, alpha, m, p, opts);
        let np = n_prefactor(mu_r, alpha, m, p, opts);
        let ks = enumerate_multiindices(m);
        let k_offsets: Vec<Vec<usize>> = ks.iter().map(|k| k.offsets().collect()).collect();
        for jidx in enumerate_multiindices(p + 1) {
            let theta = thetas.get(&jidx).map_err(|e| GmptError::Block { m, p, source: Box::new(e.into()) })?;
            let j = jidx.head().expect("non-empty") as usize - 1;
            let tail: Vec<usize> = jidx.tail().offsets().collect();
            let mut ej = [0.0; 3];
            ej[j] = 1.0;
            let (field, curl) = quad.sample(theta);
            // per K: ∫Π_K ξ×(θ+t), ∫Π_K ((p+2)⁻¹∇×θ + Π_J e_j), ∫ ξ_ℓ Π_K (θ+t)
            let nk = k_offsets.len();
            let mut acc_c = vec![[Sum::default(); 3]; nk];
            let mut acc_n = vec![[Sum::default(); 3]; nk];
            let mut acc_v = vec![[[ZERO; 3]; 3]; if with_a { nk } else { 0 }];
            for (q, (_, _, xi, w)) in quad.points.iter().enumerate() {
                let pj = tail.iter().map(|&o| xi[o]).product::<f64>();
                let t = cross(&ej, xi);
                let u: [C64; 3] = std::array::from_fn(|i| field[q][i] + pj * t[i]);
                let xu = [
                    u[2] * xi[1] - u[1] * xi[2],
                    u[0] * xi[2] - u[2] * xi[0],
                    u[1] * xi[0] - u[0] * xi[1],
                ];
                let nv: [C64; 3] = std::array::from_fn(|i| curl[q][i] / (p + 2) as f64 + pj * ej[i]);
                for (kn, ko) in k_offsets.iter().enumerate() {
                    let wk = w * ko.iter().map(|&o| xi[o]).product::<f64>();
                    for i in 0..3 {
                        acc_c[kn][i].add(xu[i] * wk);
                        acc_n[kn][i].add(nv[i] * wk);
                    }
                    if with_a {
                        for l in 0..3 {
                            for r in 0..3 {
                                acc_v[kn][l][r] += u[r] * (wk * xi[l]);
                            }
                        }
                    }
                }
            }
            for (kn, ko) in k_offsets.iter().enumerate() {
                for k in 0..3 {
                    let off = block_offsets(k, ko, j, &tail);
                    *c.at_mut(&off) = cp * acc_c[kn][k].value();
                    *n.at_mut(&off) = acc_n[kn][k].value() * np;
                }
                if let Some(a) = a.as_mut() {
                    // 𝔄[i,ℓ,k,K,j,J] = A e_i·(e_k × V_ℓ) = A ε_{ikr} V_{ℓ,r}
                    for i in 0..3 {
                        for l in 0..3 {
                            for k in 0..3 {
                                let mut v = ZERO;
                                for r in 0..3 {
                                    let e = gmpt_core::tensor::epsilon(i, k, r);
                                    if e != 0 {
                                        v += acc_v[kn][l][r] * f64::from(e);
                                    }
                                }
                                let mut off = vec![i, l];
                                off.extend(block_offsets(k, ko, j, &tail));
                                *a.at_mut(&off) = ap * v;
                            }
                        }
                    }
                }
            }
        }
        out.push(BlockArrays { m, p, c, n, a });
    }
    Ok(out)
}

fn single(
    thetas: &ThetaSet,
    spec: &ObjectSpec,
    m: usize,
    p: usize,
    with_a: bool,
    opts: &AssemblyOptions,
) -> Result<BlockArrays, GmptError> {
    let mut v = assemble_blocks(thetas, spec, m + p + 1, Some((m, p)), with_a, opts)?;
    Ok(v.remove(0))
}

pub fn assemble_c(thetas: &ThetaSet, spec: &ObjectSpec, m: usize, p: usize) -> Result<DenseTensor, GmptError> {
    Ok(single(thetas, spec, m, p, false, &AssemblyOptions::default())?.c)
}

pub fn assemble_n(thetas: &ThetaSet, spec: &ObjectSpec, m: usize, p: usize) -> Result<DenseTensor, GmptError> {
    Ok(single(thetas, spec, m, p, false, &AssemblyOptions::default())?.n)
}

pub fn assemble_a(thetas: &ThetaSet, spec: &ObjectSpec, m: usize, p: usize) -> Result<DenseTensor, GmptError> {
    Ok(single(thetas, spec, m, p, true, &AssemblyOptions::default())?.a.expect("requested"))
}

/// Relative defect of skew symmetry between slots a and b.
pub fn skew_defect(t: &DenseTensor, a: usize, b: usize) -> Result<f64, GmptError> {
    let rank = t.rank();
    if a >= rank || b >= rank {
        return Err(TensorError::SlotOutOfRange { slot: a.max(b), rank }.into());
    }
    let mut diff: f64 = 0.0;
    let mut offs = vec![0usize; rank];
    for lin in 0..t.data().len() {
        let mut rem = lin;
        for s in (0..rank).rev() {
            offs[s] = rem % 3;
            rem /= 3;
        }
        let mut sw = offs.clone();
        sw.swap(a, b);
        diff = diff.max((t.at(&offs) + t.at(&sw)).norm());
    }
    let scale = t.max_abs();
    Ok(if scale > 0.0 { diff / scale } else { 0.0 })
}

/// ℭ = ½ ε_{rik} 𝔄[i,ℓ,k,…] and then Č = ½ ε_{kℓr} ℭ[r,ℓ,…].
pub fn reduce_a_to_c(a: &DenseTensor) -> Result<DenseTensor, GmptError> {
    let defect = skew_defect(a, 0, 2)?;
    if defect > SKEW_TOL {
        return Err(GmptError::NotSkew { defect });
    }
    let frak_c = a.contract_skew(0, 2)?;
    Ok(frak_c.contract_skew(1, 0)?)
}

/// Dedicated rank-2 path: Č_kj = −iνα³/4 e_k·∫ξ×(θ_j + e_j×ξ), 𝔑_kj = α³(1−μ_r⁻¹)∫(δ_kj + ½ e_k·∇×θ_j).
pub fn mpt_blocks(thetas: &ThetaSet, spec: &ObjectSpec) -> Result<(DenseTensor, DenseTensor), GmptError> {
    let mesh = &thetas.disc.mesh;
    let quad = ObjectQuadrature::new(mesh, 3);
    let mut vol = Sum::default();
    for q in &quad.points {
        vol.add(C64::new(q.3, 0.0));
    }
    let volume = vol.value().re;
    let a3 = spec.alpha.powi(3);
    let mut c = [[ZERO; 3]; 3];
    let mut n = [[ZERO; 3]; 3];
    for j in 0..3 {
        let theta = thetas.get(&MultiIndex::from_offsets(&[j]))?;
        let (field, curl) = quad.sample(theta);
        let mut ej = [0.0; 3];
        ej[j] = 1.0;
        let mut xc = [Sum::default(); 3];
        let mut cc = [Sum::default(); 3];
        for (q, (_, _, xi, w)) in quad.points.iter().enumerate() {
            let t = cross(&ej, xi);
            let u: [C64; 3] = std::array::from_fn(|i| field[q][i] + t[i]);
            let xu = [
                u[2] * xi[1] - u[1] * xi[2],
                u[0] * xi[2] - u[2] * xi[0],
                u[1] * xi[0] - u[0] * xi[1],
            ];
            for i in 0..3 {
                xc[i].add(xu[i] * *w);
                cc[i].add(curl[q][i] * *w);
            }
        }
        for k in 0..3 {
            c[k][j] = C64::new(0.0, -thetas.nu * a3 / 4.0) * xc[k].value();
            let delta = if k == j { volume } else { 0.0 };
            n[k][j] = (cc[k].value() * 0.5 + delta) * (a3 * (1.0 - 1.0 / thetas.mu_r));
        }
    }
    Ok((DenseTensor::matrix(c), DenseTensor::matrix(n)))
}

/// Rank-2 M̌̌ = −Č + 𝒩, solving the three p = 0 problems.
pub fn mpt(spec: &ObjectSpec, cfg: &SolveConfig) -> Result<DenseTensor, GmptError> {
    let thetas = solve_batch(spec, 0, cfg, None)?;
    let (c, n) = mpt_blocks(&thetas, spec)?;
    Ok(n.sub(&c)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmptMeta {
    pub order: usize,
    pub alpha: f64,
    pub z: [f64; 3],
    pub sigma_star: f64,
    pub mu_r: f64,
    pub omega: f64,
    pub nu: f64,
    pub mesh_hash: String,
    pub solver_key: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmptBlock {
    pub m: usize,
    pub p: usize,
    #[serde(rename = "C")]
    pub c: DenseTensor,
    #[serde(rename = "N")]
    pub n: DenseTensor,
}

impl GmptBlock {
    /// M̌̌ = −Č + 𝔑.
    pub fn combined(&self) -> DenseTensor {
        self.n.sub(&self.c).expect("blocks share rank")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmptSet {
    pub meta: GmptMeta,
    pub blocks: Vec<GmptBlock>,
}

impl GmptSet {
    pub fn order(&self) -> usize {
        self.meta.order
    }

    pub fn block(&self, m: usize, p: usize) -> Result<&GmptBlock, GmptError> {
        self.blocks.iter().find(|b| b.m == m && b.p == p).ok_or(GmptError::MissingBlock { m, p })
    }

    /// Every block mapped through the same orthogonal Q in each slot.
    pub fn transformed(&self, q: &Mat3) -> Result<GmptSet, GmptError> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| Ok(GmptBlock { m: b.m, p: b.p, c: b.c.transform(q)?, n: b.n.transform(q)? }))
            .collect::<Result<_, GmptError>>()?;
        Ok(GmptSet { meta: self.meta.clone(), blocks })
    }

    /// Structural check: exactly the blocks m + p ≤ order − 1, each of rank 2 + m + p, all finite.
    pub fn validate(&self) -> Result<(), String> {
        let order = self.meta.order;
        if order == 0 {
            return Err("order is zero".into());
        }
        let expected = order * (order + 1) / 2;
        if self.blocks.len() != expected {
            return Err(format!("{} blocks, expected {expected}", self.blocks.len()));
        }
        for s in 0..order {
            for m in 0..=s {
                let b = self.block(m, s - m).map_err(|e| e.to_string())?;
                for (name, t) in [("C", &b.c), ("N", &b.n)] {
                    if t.rank() != 2 + s {
                        return Err(format!("block ({m},{}) {name} has rank {}, expected {}", s - m, t.rank(), 2 + s));
                    }
                    if t.data().iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                        return Err(format!("block ({m},{}) {name} has non-finite entries", s - m));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("set serialises")
    }

    pub fn from_json(text: &str) -> Result<GmptSet, serde_json::Error> {
        serde_json::from_str(text)
    }
}

pub fn meta_for(spec: &ObjectSpec, order: usize, solver_key: &str) -> GmptMeta {
    GmptMeta {
        order,
        alpha: spec.alpha,
        z: spec.z,
        sigma_star: spec.sigma_star,
        mu_r: spec.mu_r(),
        omega: spec.omega,
        nu: spec.nu(),
        mesh_hash: spec.mesh.hash(),
        solver_key: solver_key.to_owned(),
        version: env!("CARGO_PKG_VERSION").to_owned(),
    }
}

/// Set from already solved θ (θ must reach p = order − 1).
pub fn set_from_thetas(thetas: &ThetaSet, spec: &ObjectSpec, order: usize) -> Result<GmptSet, GmptError> {
    set_from_thetas_with(thetas, spec, order, &AssemblyOptions::default())
}

pub fn set_from_thetas_with(
    thetas: &ThetaSet,
    spec: &ObjectSpec,
    order: usize,
    opts: &AssemblyOptions,
) -> Result<GmptSet, GmptError> {
    let arrays = assemble_blocks(thetas, spec, order, None, false, opts)?;
    Ok(GmptSet {
        meta: meta_for(spec, order, &thetas.key),
        blocks: arrays.into_iter().map(|b| GmptBlock { m: b.m, p: b.p, c: b.c, n: b.n }).collect(),
    })
}

/// Solves and assembles all blocks with m + p ≤ order − 1.
pub fn assemble_set(spec: &ObjectSpec, order: usize, cfg: &SolveConfig) -> Result<GmptSet, GmptError> {
    if order == 0 {
        return Err(GmptError::InvalidOrder(order));
    }
    let thetas = solve_batch(spec, order - 1, cfg, None)?;
    set_from_thetas(&thetas, spec, order)
}

/// Per-block deviation between two sets, relative to max(‖block‖, floor · α^{m+p} R^{m+p} ‖M̌̌₀₀‖).
/// The floor keeps blocks that vanish by symmetry from producing noise ratios.
pub fn set_deviation(a: &GmptSet, b: &GmptSet, radius: f64, floor: f64) -> Result<BTreeMap<(usize, usize), f64>, GmptError> {
    let base = a.block(0, 0)?.combined().norm();
    let mut out = BTreeMap::new();
    for blk in &a.blocks {
        let other = b.block(blk.m, blk.p)?;
        let (x, y) = (blk.combined(), other.combined());
        let s = blk.m + blk.p;
        let scale = x
            .norm()
            .max(y.norm())
            .max(floor * base * (a.meta.alpha * radius).powi(s as i32));
        let d = x.sub(&y)?.norm();
        out.insert((blk.m, blk.p), if scale > 0.0 { d / scale } else { 0.0 });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EquivarianceReport {
    /// Max relative deviation per (m, p) block.
    pub deviation: BTreeMap<(usize, usize), f64>,
}

impl EquivarianceReport {
    pub fn max(&self) -> f64 {
        self.deviation.values().copied().fold(0.0, f64::max)
    }
}

/// Compares the set assembled on the mesh mapped by Q against the transformed original set.
pub fn check_frame_equivariance(
    spec: &ObjectSpec,
    q: &Mat3,
    order: usize,
    cfg: &SolveConfig,
) -> Result<EquivarianceReport, GmptError> {
    let original = assemble_set(spec, order, cfg)?;
    let mut rotated_spec = spec.clone();
    rotated_spec.mesh = std::sync::Arc::new(spec.mesh.apply_orthogonal(q).map_err(SolveError::from)?);
    let rotated = assemble_set(&rotated_spec, order, cfg)?;
    let expected = original.transformed(q)?;
    let deviation = set_deviation(&expected, &rotated, spec.mesh.object_radius(), 1e-3)?;
    Ok(EquivarianceReport { deviation })
}

/// Pólya–Szegő tensor T(μ_r) (or T(0) when μ_r = 1) of the object region, from the scalar solver.
pub fn polya_szego_tensor(mesh: &TetMesh, mu_r: f64) -> Result<Mat3, GmptError> {
    Ok(scalar::polya_szego(mesh, scalar::canonical_contrast(mu_r), &PcgSettings::default())?)
}
