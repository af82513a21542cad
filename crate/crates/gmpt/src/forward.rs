//! The order-M expansion of the field perturbation, the integral-representation
//! oracle it is checked against, and the coil-voltage formula.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use gmpt_core::kernels::{green_deriv_with_limit, green_hessian, KernelError};
use gmpt_core::linalg::{norm, sub, Vec3};
use gmpt_core::{DenseTensor, PolyError, PolyField};
use num_complex::Complex64 as C64;

use crate::fem::{eval_curl, eval_field, local_dofs, TetGeometry};
use crate::mesh::ObjectSpec;
use crate::polarizability::{set_from_thetas, GmptError, GmptSet};
use crate::quadrature::grundmann_moller;
use crate::transmission::{superpose_adelta, SolveError, ThetaSet};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Default exclusion factor around the circumscribing sphere for the oracle.
pub const ORACLE_EXCLUSION: f64 = 1.5;

#[derive(Debug, thiserror::Error)]
pub enum ForwardError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Gmpt(#[from] GmptError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("requested order {requested} exceeds the set order {available}")]
    OrderExceeded { requested: usize, available: usize },
    #[error("evaluation point at distance {distance:.3e} is inside the exclusion radius {limit:.3e}")]
    PointTooClose { distance: f64, limit: f64 },
    #[error("study needs at least two alpha values")]
    TooFewSamples,
}

#[derive(Debug, Clone)]
pub struct TermContribution {
    pub m: usize,
    pub p: usize,
    pub value: [C64; 3],
}

#[derive(Debug, Clone)]
pub struct ExpansionResult {
    pub x: Vec3,
    pub order: usize,
    pub h: [C64; 3],
    pub terms: Vec<TermContribution>,
}

impl ExpansionResult {
    pub fn term(&self, m: usize, p: usize) -> Option<&TermContribution> {
        self.terms.iter().find(|t| t.m == m && t.p == p)
    }
}

/// (D^{2+m}G)_{[i,K(m+1)]} M̌̌_{K(m+1)J(p+1)} (D^p H₀)_{J(p+1)} summed over m + p ≤ order − 1.
///
/// `h0` holds the derivative tensors of the background at z.
pub fn eval_expansion(
    set: &GmptSet,
    h0: &PolyField,
    z: &Vec3,
    x: &Vec3,
    order: usize,
) -> Result<ExpansionResult, ForwardError> {
    if order > set.order() || order == 0 {
        return Err(ForwardError::OrderExceeded { requested: order, available: set.order() });
    }
    let mut h = [ZERO; 3];
    let mut terms = Vec::new();
    let mut gcache: BTreeMap<usize, DenseTensor> = BTreeMap::new();
    for s in 0..order {
        for m in 0..=s {
            let p = s - m;
            let block = set.block(m, p)?.combined();
            let g = match gcache.get(&m) {
                Some(g) => g.clone(),
                None => {
                    let g = green_deriv_with_limit(x, z, 2 + m, 2 + order)?;
                    gcache.insert(m, g.clone());
                    g
                }
            };
            let gm = g.contract(&block, m + 1).expect("ranks match");
            let v = gm.contract(&h0.block(p), p + 1).expect("ranks match");
            let value = v.as_vector().expect("rank one");
            for i in 0..3 {
                h[i] += value[i];
            }
            terms.push(TermContribution { m, p, value });
        }
    }
    Ok(ExpansionResult { x: *x, order, h, terms })
}

/// Dedicated rank-2 evaluation D²G(x,z) M̌̌ H₀(z).
pub fn eval_mpt(mpt: &DenseTensor, h0: &[C64; 3], z: &Vec3, x: &Vec3) -> Result<[C64; 3], ForwardError> {
    let d2 = green_hessian(x, z)?;
    let m = mpt.as_matrix().expect("rank two");
    let g = d2.as_matrix().expect("rank two");
    let mut mh = [ZERO; 3];
    for k in 0..3 {
        for j in 0..3 {
            mh[k] += m[k][j] * h0[j];
        }
    }
    let mut out = [ZERO; 3];
    for i in 0..3 {
        for k in 0..3 {
            out[i] += g[i][k] * mh[k];
        }
    }
    Ok(out)
}

/// Induced voltage mᵐ·D²G(x,z)·M̌̌·D²G(z,y)·mᵉ for point-dipole coils.
pub fn voltage(m_m: &Vec3, x: &Vec3, m_e: &Vec3, y: &Vec3, z: &Vec3, mpt: &DenseTensor) -> Result<C64, ForwardError> {
    let gx = green_hessian(x, z)?.as_matrix().expect("rank two");
    let gy = green_hessian(z, y)?.as_matrix().expect("rank two");
    let m = mpt.as_matrix().expect("rank two");
    let mut h0 = [ZERO; 3];
    for i in 0..3 {
        for j in 0..3 {
            h0[i] += gy[i][j] * m_e[j];
        }
    }
    let mut mh = [ZERO; 3];
    for k in 0..3 {
        for j in 0..3 {
            mh[k] += m[k][j] * h0[j];
        }
    }
    let mut v = ZERO;
    for i in 0..3 {
        for k in 0..3 {
            v += m_m[i] * gx[i][k] * mh[k];
        }
    }
    Ok(v)
}

/// E_α and H_α sampled at physical quadrature points inside B_α.
///
/// With y = z + αξ the fields are reconstructed as
/// E_α = iω (A₀(y) + α A_Δ(ξ)) and H_α = μ_r⁻¹ (H₀(y) + μ₀⁻¹ ∇_ξ × A_Δ(ξ)),
/// where A₀ = μ₀ × (uncurl of H₀) and A_Δ is the θ superposition.
#[derive(Debug, Clone)]
pub struct InteriorFields {
    /// (y, α³ × weight, E_α(y), H_α(y))
    pub samples: Vec<(Vec3, f64, [C64; 3], [C64; 3])>,
    pub z: Vec3,
    /// Circumscribing radius α · max|ξ| of the object about z.
    pub radius: f64,
    pub sigma_star: f64,
    pub mu_r: f64,
}

impl InteriorFields {
    pub fn new(
        thetas: &ThetaSet,
        spec: &ObjectSpec,
        h0: &PolyField,
        quad_degree: usize,
    ) -> Result<InteriorFields, ForwardError> {
        let degree = h0.degree().min(thetas.max_p);
        let adelta = superpose_adelta(thetas, h0, spec, degree)?;
        let a0 = h0.uncurl()?;
        let mesh = &thetas.disc.mesh;
        let rule = grundmann_moller(3, quad_degree);
        let alpha = spec.alpha;
        let (mu0, mu_r) = (spec.mu0, spec.mu_r());
        let omega = spec.omega;
        let mut samples = Vec::new();
        for t in mesh.object_tets() {
            let g = TetGeometry::of(mesh, t);
            let local = local_dofs(mesh, &adelta, t);
            let curl = eval_curl(&g, &local);
            for (lam, w) in rule.points.iter().zip(&rule.weights) {
                let xi = g.point(lam);
                let y = [spec.z[0] + alpha * xi[0], spec.z[1] + alpha * xi[1], spec.z[2] + alpha * xi[2]];
                let ad = eval_field(&g, &local, lam);
                let a0y = a0.eval(&y);
                let hy = h0.eval(&y);
                let e: [C64; 3] = std::array::from_fn(|i| C64::new(0.0, omega) * (a0y[i] * mu0 + ad[i] * alpha));
                let h: [C64; 3] = std::array::from_fn(|i| (hy[i] + curl[i] / mu0) / mu_r);
                samples.push((y, alpha.powi(3) * w * g.volume, e, h));
            }
        }
        Ok(InteriorFields {
            samples,
            z: spec.z,
            radius: alpha * mesh.object_radius(),
            sigma_star: spec.sigma_star,
            mu_r,
        })
    }

    /// σ* ∫ ∇_x G × E_α − (1 − μ_r) ∫ D²_x G H_α.
    pub fn field_at(&self, x: &Vec3) -> Result<[C64; 3], ForwardError> {
        let distance = norm(&sub(x, &self.z));
        let limit = ORACLE_EXCLUSION * self.radius;
        if distance < limit {
            return Err(ForwardError::PointTooClose { distance, limit });
        }
        let mut out = [ZERO; 3];
        let contrast = 1.0 - self.mu_r;
        for (y, w, e, h) in &self.samples {
            let r = sub(x, y);
            let d = norm(&r);
            let d3 = d * d * d;
            // ∇_x G = −r/(4π|r|³)
            let grad: Vec3 = std::array::from_fn(|i| -r[i] / (4.0 * std::f64::consts::PI * d3));
            let gxe = [
                e[2] * grad[1] - e[1] * grad[2],
                e[0] * grad[2] - e[2] * grad[0],
                e[1] * grad[0] - e[0] * grad[1],
            ];
            let f = 1.0 / (4.0 * std::f64::consts::PI * d3);
            let rh = r[0] * h[0] + r[1] * h[1] + r[2] * h[2];
            for i in 0..3 {
                let hess_h = (r[i] * rh * 3.0 / (d * d) - h[i]) * f;
                out[i] += (gxe[i] * self.sigma_star - hess_h * contrast) * *w;
            }
        }
        Ok(out)
    }
}

/// Oracle perturbation at one point.
pub fn oracle_field(
    thetas: &ThetaSet,
    spec: &ObjectSpec,
    h0: &PolyField,
    x: &Vec3,
    quad_degree: usize,
) -> Result<[C64; 3], ForwardError> {
    InteriorFields::new(thetas, spec, h0, quad_degree)?.field_at(x)
}

fn vnorm(v: &[C64; 3]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub alpha: f64,
    pub order: usize,
    pub abs_err: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
    /// Least-squares slope of log abs_err against log α per order.
    pub slopes: BTreeMap<usize, f64>,
}

impl StudyTable {
    /// Columns alpha, M, abs_err, rel_err, slope; the slope is filled on the last row of each M.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,M,abs_err,rel_err,slope\n");
        for (n, r) in self.rows.iter().enumerate() {
            let last = self.rows.get(n + 1).is_none_or(|next| next.order != r.order);
            let slope = if last { format!("{:.6}", self.slopes[&r.order]) } else { String::new() };
            let _ = writeln!(out, "{:.6e},{},{:.6e},{:.6e},{}", r.alpha, r.order, r.abs_err, r.rel_err, slope);
        }
        out
    }
}

pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Errors |oracle − expansion| over an α family sharing ν (so one θ set serves all α).
///
/// `base` fixes mesh, z, μ_r and ν; `h0` is the background's Taylor data at z;
/// errors are root-sum-square over the evaluation points, `rel_err` divides by the
/// background magnitude there.
pub fn convergence_study(
    thetas: &ThetaSet,
    base: &ObjectSpec,
    alphas: &[f64],
    h0: &PolyField,
    points: &[Vec3],
    orders: &[usize],
    quad_degree: usize,
) -> Result<StudyTable, ForwardError> {
    if alphas.len() < 2 {
        return Err(ForwardError::TooFewSamples);
    }
    let max_order = orders.iter().copied().max().unwrap_or(1);
    let bg: f64 = points.iter().map(|x| vnorm(&h0.eval(x)).powi(2)).sum::<f64>().sqrt();
    let mut per_alpha = Vec::new();
    for &alpha in alphas {
        let spec = base.with_alpha_fixed_nu(alpha);
        let set = set_from_thetas(thetas, &spec, max_order)?;
        let interior = InteriorFields::new(thetas, &spec, h0, quad_degree)?;
        let mut errs = Vec::new();
        for &order in orders {
            let mut sq = 0.0;
            for x in points {
                let oracle = interior.field_at(x)?;
                let exp = eval_expansion(&set, h0, &spec.z, x, order)?;
                let d: [C64; 3] = std::array::from_fn(|i| oracle[i] - exp.h[i]);
                sq += vnorm(&d).powi(2);
            }
            errs.push(sq.sqrt());
        }
        per_alpha.push(errs);
    }
    let mut rows = Vec::new();
    let mut slopes = BTreeMap::new();
    for (n, &order) in orders.iter().enumerate() {
        let errs: Vec<f64> = per_alpha.iter().map(|e| e[n]).collect();
        for (a, e) in alphas.iter().zip(&errs) {
            rows.push(StudyRow { alpha: *a, order, abs_err: *e, rel_err: e / bg });
        }
        slopes.insert(order, fit_slope(alphas, &errs));
    }
    Ok(StudyTable { rows, slopes })
}
