//! Self-check suite run by `gmpt verify`: algebraic identities, assembly audits and
//! expansion-versus-oracle checks on small fixtures, with optional fault injection
//! to confirm that the checks can fail.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use gmpt_core::kernels::green_deriv;
use gmpt_core::linalg::{rotation_axis_angle, Vec3};
use gmpt_core::polyfield::{Polynomial, VectorPolynomial};
use gmpt_core::tensor::epsilon;
use gmpt_core::{DenseTensor, PolyField};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fixtures::{FixtureSpec, Shape};
use crate::forward::{eval_expansion, ForwardError, InteriorFields};
use crate::mesh::{MeshError, ObjectSpec, Region, TetMesh, MU0};
use crate::polarizability::{
    assemble_blocks, check_frame_equivariance, mpt_blocks, polya_szego_tensor, set_from_thetas, set_from_thetas_with,
    skew_defect, AssemblyOptions, GmptError,
};
use crate::transmission::{solve_batch, SolveConfig, SolveError, ThetaSet};

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Gmpt(#[from] GmptError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
}

/// Deliberate defects used to show that the suite detects them.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Faults {
    /// Drop the (−1)^m factor from the assembled tensors.
    pub flip_m_sign: bool,
    /// Reduce 𝔄 with an alternating tensor that has one wrong sign.
    pub tamper_epsilon: bool,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub cells_in: usize,
    pub cells_out: usize,
    /// Finer sphere used for the static comparison, whose two discretisations converge from opposite sides.
    pub static_cells: (usize, usize),
    pub far_factor: f64,
    pub solve: SolveConfig,
    pub faults: Faults,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { cells_in: 3, cells_out: 3, static_cells: (6, 5), far_factor: 5.0, solve: SolveConfig::default(), faults: Faults::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Measured quantities reported without a pass/fail threshold.
    pub informational: bool,
}

impl CheckResult {
    fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        CheckResult { name: name.into(), value, tolerance, passed: value <= tolerance, informational: false }
    }

    fn info(name: &str, value: f64) -> Self {
        CheckResult { name: name.into(), value, tolerance: f64::NAN, passed: value.is_finite(), informational: true }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<28} {:>12} {:>12}  result", "check", "value", "tolerance");
        for c in &self.checks {
            let tol = if c.informational { "-".to_owned() } else { format!("{:.3e}", c.tolerance) };
            let verdict = match (c.informational, c.passed) {
                (true, true) => "INFO",
                (_, true) => "PASS",
                (_, false) => "FAIL",
            };
            let _ = writeln!(out, "{:<28} {:>12.3e} {:>12}  {verdict}", c.name, c.value, tol);
        }
        out
    }
}

fn tampered_epsilon(i: usize, j: usize, k: usize) -> f64 {
    if (i, j, k) == (0, 1, 2) {
        -1.0
    } else {
        f64::from(epsilon(i, j, k))
    }
}

fn true_epsilon(i: usize, j: usize, k: usize) -> f64 {
    f64::from(epsilon(i, j, k))
}

/// Č[k,…] = ¼ Σ e(k,ℓ,r) e(r,i,q) 𝔄[i,ℓ,q,…], written out with explicit loops.
fn reduce_with(a: &DenseTensor, e: fn(usize, usize, usize) -> f64) -> DenseTensor {
    let rank = a.rank() - 2;
    DenseTensor::from_fn(rank, |out| {
        let k = out[0];
        let rest = &out[1..];
        let mut acc = C64::new(0.0, 0.0);
        let mut full = vec![0usize; rank + 2];
        full[3..].copy_from_slice(rest);
        for l in 0..3 {
            for r in 0..3 {
                let outer = e(k, l, r);
                if outer == 0.0 {
                    continue;
                }
                for i in 0..3 {
                    for q in 0..3 {
                        let inner = e(r, i, q);
                        if inner == 0.0 {
                            continue;
                        }
                        full[0] = i;
                        full[1] = l;
                        full[2] = q;
                        acc += a.at(&full) * (0.25 * outer * inner);
                    }
                }
            }
        }
        acc
    })
}

fn rel(a: &DenseTensor, b: &DenseTensor) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        a.sub(b).expect("same rank").norm() / scale
    }
}

fn derivative(p: &Polynomial, axis: usize) -> Polynomial {
    let mut out = Polynomial::new();
    for (exps, c) in p {
        if exps[axis] > 0 {
            let mut e = *exps;
            e[axis] -= 1;
            *out.entry(e).or_insert(C64::new(0.0, 0.0)) += c * f64::from(exps[axis]);
        }
    }
    out
}

fn curl(v: &VectorPolynomial) -> VectorPolynomial {
    let mut out = VectorPolynomial::zero(v.center);
    for (i, j, k) in [(0, 1, 2), (1, 2, 0), (2, 0, 1)] {
        for (e, c) in derivative(&v.components[k], j) {
            out.add_term(i, e, c);
        }
        for (e, c) in derivative(&v.components[j], k) {
            out.add_term(i, e, -c);
        }
    }
    out
}

fn coefficient_gap(a: &VectorPolynomial, b: &VectorPolynomial) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for (e, c) in a.components[i].iter().chain(b.components[i].iter()) {
            worst = worst.max((a.coefficient(i, *e) - b.coefficient(i, *e)).norm() / c.norm().max(1.0));
        }
    }
    worst
}

fn algebraic_checks(report: &mut VerifyReport) {
    let mut anti: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                let e = epsilon(i, j, k);
                anti = anti.max(f64::from((e + epsilon(j, i, k)).abs() + (e + epsilon(i, k, j)).abs()));
            }
        }
    }
    anti = anti.max(f64::from((epsilon(0, 1, 2) - 1).abs()));
    report.checks.push(CheckResult::at_most("epsilon_antisymmetry", anti, 0.0));

    let mut contraction: f64 = 0.0;
    let d = |a: usize, b: usize| f64::from(u8::from(a == b));
    for j in 0..3 {
        for k in 0..3 {
            for l in 0..3 {
                for m in 0..3 {
                    let lhs: f64 = (0..3).map(|i| f64::from(epsilon(i, j, k) * epsilon(i, l, m))).sum();
                    contraction = contraction.max((lhs - (d(j, l) * d(k, m) - d(j, m) * d(k, l))).abs());
                }
            }
        }
    }
    report.checks.push(CheckResult::at_most("epsilon_contraction", contraction, 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut gap: f64 = 0.0;
    for _ in 0..20 {
        let centre: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let mut potential = VectorPolynomial::zero(centre);
        for _ in 0..12 {
            let e = [rng.random_range(0..3u8), rng.random_range(0..3u8), rng.random_range(0..2u8)];
            potential.add_term(rng.random_range(0..3), e, C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        }
        let field = curl(&potential);
        let Ok(s) = PolyField::from_vector_polynomial(&field) else {
            gap = f64::INFINITY;
            continue;
        };
        match s.uncurl() {
            Ok(t) => gap = gap.max(coefficient_gap(&curl(&t), &field)),
            Err(_) => gap = f64::INFINITY,
        }
    }
    report.checks.push(CheckResult::at_most("uncurl_exactness", gap, 1e-12));

    let mut worst: f64 = 0.0;
    let x = [0.7, -0.4, 0.9];
    let z = [0.1, 0.2, -0.3];
    for q in 1..=5 {
        let Ok(g) = green_deriv(&x, &z, q) else {
            worst = f64::INFINITY;
            continue;
        };
        let scale = g.max_abs();
        let data = g.data();
        for (lin, v) in data.iter().enumerate() {
            let mut digits = vec![0usize; q];
            let mut r = lin;
            for s in (0..q).rev() {
                digits[s] = r % 3;
                r /= 3;
            }
            for a in 1..q {
                let mut sw = digits.clone();
                sw.swap(0, a);
                worst = worst.max((v - g.at(&sw)).norm() / scale);
            }
            if q >= 2 && digits[0] == 0 && digits[1] == 0 {
                let trace: C64 = (0..3)
                    .map(|i| {
                        let mut t = digits.clone();
                        t[0] = i;
                        t[1] = i;
                        g.at(&t)
                    })
                    .sum();
                worst = worst.max(trace.norm() / scale);
            }
        }
        let t = 1.7;
        let xs: Vec3 = std::array::from_fn(|i| z[i] + t * (x[i] - z[i]));
        if let Ok(gs) = green_deriv(&xs, &z, q) {
            let expected = g.data().iter().map(|v| v * t.powi(-1 - q as i32));
            let d = gs.data().iter().zip(expected).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            worst = worst.max(d / gs.max_abs());
        }
    }
    report.checks.push(CheckResult::at_most("green_derivative_identities", worst, 1e-12));
}

fn sphere(opts: &VerifyOptions, shift: &Vec3) -> Result<Arc<TetMesh>, VerifyError> {
    let spec = FixtureSpec { far_factor: opts.far_factor, ..FixtureSpec::new(Shape::Sphere { radius: 1.0 }, opts.cells_in, opts.cells_out) };
    Ok(Arc::new(spec.build()?.translated_scaled(shift, 1.0)?))
}

/// Points at distance `factor`·α·diam from z along fixed, well-spread directions.
pub fn evaluation_points(z: &Vec3, distance: f64) -> Vec<Vec3> {
    let dirs: [Vec3; 6] = [
        [1.0, 0.2, 0.1],
        [-0.3, 1.0, 0.2],
        [0.1, -0.2, 1.0],
        [-1.0, -0.4, 0.3],
        [0.5, -1.0, -0.6],
        [-0.2, 0.6, -1.0],
    ];
    dirs.iter()
        .map(|d| {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            std::array::from_fn(|i| z[i] + distance * d[i] / n)
        })
        .collect()
}

/// Linear, divergence-free background with a symmetric trace-free gradient.
pub fn linear_background(z: &Vec3, gradient_scale: f64) -> PolyField {
    let c = |v: f64| C64::new(v, 0.0);
    let b0 = DenseTensor::vector([c(1.0), c(0.5), c(-0.3)]);
    let g = [[3.0, 1.0, -0.5], [1.0, -2.0, 0.8], [-0.5, 0.8, -1.0]];
    let b1 = DenseTensor::from_fn(2, |o| c(gradient_scale * g[o[0]][o[1]]));
    PolyField::new(*z, vec![b0, b1]).expect("two blocks")
}

/// Expansion against oracle, max relative deviation over the evaluation points.
fn oracle_deviation(
    thetas: &ThetaSet,
    spec: &ObjectSpec,
    h0: &PolyField,
    order: usize,
    opts: &AssemblyOptions,
    points: &[Vec3],
) -> Result<f64, VerifyError> {
    let set = set_from_thetas_with(thetas, spec, order, opts)?;
    let interior = InteriorFields::new(thetas, spec, h0, 4)?;
    let mut worst: f64 = 0.0;
    for x in points {
        let o = interior.field_at(x)?;
        let e = eval_expansion(&set, h0, &spec.z, x, order)?.h;
        let on = o.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let d = (0..3).map(|i| (o[i] - e[i]).norm_sqr()).sum::<f64>().sqrt();
        worst = worst.max(d / on);
    }
    Ok(worst)
}

/// Normal flux ∫_Γ n·θ from the exterior side, relative to ∫_Γ |θ|.
fn interface_flux(thetas: &ThetaSet) -> f64 {
    let mesh = &thetas.disc.mesh;
    let mut owner: BTreeMap<[usize; 3], usize> = BTreeMap::new();
    for (t, tet) in mesh.tets().iter().enumerate() {
        if mesh.regions()[t] != Region::Exterior {
            continue;
        }
        for skip in 0..4 {
            let mut f: Vec<usize> = (0..4).filter(|&v| v != skip).map(|v| tet[v]).collect();
            f.sort_unstable();
            owner.insert([f[0], f[1], f[2]], t);
        }
    }
    let mut worst: f64 = 0.0;
    for theta in thetas.solutions.values() {
        let mut flux = C64::new(0.0, 0.0);
        let mut mag = 0.0;
        for face in mesh.interface() {
            let mut key = face.vertices;
            key.sort_unstable();
            let Some(&t) = owner.get(&key) else { continue };
            let tet = mesh.tets()[t];
            // barycentric coordinates of the face centroid within the exterior tet
            let lambda: Vec<f64> = tet.iter().map(|v| if face.vertices.contains(v) { 1.0 / 3.0 } else { 0.0 }).collect();
            let v = theta.field(t, &lambda);
            let n: C64 = (0..3).map(|i| v[i] * face.normal[i]).sum();
            flux += n * face.area;
            mag += v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt() * face.area;
        }
        if mag > 0.0 {
            worst = worst.max(flux.norm() / mag);
        }
    }
    worst
}

/// Runs every check; a numerical failure of a fixture solve is returned as an error.
pub fn run(opts: &VerifyOptions) -> Result<VerifyReport, VerifyError> {
    let mut report = VerifyReport::default();
    algebraic_checks(&mut report);
    let assembly = AssemblyOptions { alternating_sign: !opts.faults.flip_m_sign, ..AssemblyOptions::default() };

    // shifted sphere so that odd blocks do not vanish by symmetry
    let shift = [0.25, 0.15, 0.1];
    let mesh = sphere(opts, &shift)?;
    let (alpha, nu, mu_r, omega) = (0.01, 1.0, 2.0, 1.0e4);
    let sigma = nu / (omega * MU0 * alpha * alpha);
    let spec = ObjectSpec::new(mesh.clone(), alpha, [0.0; 3], sigma, mu_r, omega)?;
    let thetas = solve_batch(&spec, 1, &opts.solve, None)?;

    let arrays = assemble_blocks(&thetas, &spec, 2, None, true, &assembly)?;
    let mut skew: f64 = 0.0;
    let mut chain: f64 = 0.0;
    let eps = if opts.faults.tamper_epsilon { tampered_epsilon } else { true_epsilon };
    for b in &arrays {
        let a = b.a.as_ref().expect("requested");
        skew = skew.max(skew_defect(a, 0, 2)?);
        chain = chain.max(rel(&reduce_with(a, eps), &b.c));
    }
    report.checks.push(CheckResult::at_most("a_skew_symmetry", skew, 1e-13));
    report.checks.push(CheckResult::at_most("reduction_chain", chain, 1e-12));

    let (c_dedicated, n_dedicated) = mpt_blocks(&thetas, &spec)?;
    let b00 = assemble_blocks(&thetas, &spec, 1, Some((0, 0)), false, &assembly)?.remove(0);
    let paths = rel(&b00.c, &c_dedicated).max(rel(&b00.n, &n_dedicated));
    report.checks.push(CheckResult::at_most("rank2_dual_path", paths, 1e-14));

    let points = evaluation_points(&spec.z, 10.0 * alpha * mesh.object_diameter());
    let h0 = linear_background(&spec.z, 5.0);
    let alternation = oracle_deviation(&thetas, &spec, &h0, 2, &assembly, &points)?;
    report.checks.push(CheckResult::at_most("m_alternation_oracle", alternation, 2e-2));

    let scaled_spec = spec.with_alpha_fixed_nu(2.0 * alpha);
    let base = set_from_thetas(&thetas, &spec, 2)?;
    let scaled = set_from_thetas(&thetas, &scaled_spec, 2)?;
    let mut scaling: f64 = 0.0;
    for b in &base.blocks {
        let s = scaled.block(b.m, b.p)?;
        let factor = 2f64.powi((3 + b.m + b.p) as i32);
        let expected = DenseTensor::from_vec(b.c.rank(), b.combined().data().iter().map(|v| v * factor).collect())
            .expect("same size");
        scaling = scaling.max(rel(&expected, &s.combined()));
    }
    report.checks.push(CheckResult::at_most("alpha_scaling_law", scaling, 1e-12));

    report.checks.push(CheckResult::info("interface_normal_flux", interface_flux(&thetas)));

    let loose = SolveConfig { eps_rel: 10.0 * opts.solve.eps_rel, ..opts.solve.clone() };
    let t0 = solve_batch(&spec, 0, &opts.solve, None)?;
    let t1 = solve_batch(&spec, 0, &loose, None)?;
    let m0 = mpt_blocks(&t0, &spec)?;
    let m1 = mpt_blocks(&t1, &spec)?;
    let sensitivity = rel(&m0.1.sub(&m0.0).expect("rank two"), &m1.1.sub(&m1.0).expect("rank two"));
    report.checks.push(CheckResult::at_most("epsilon_sensitivity", sensitivity, 1e-4));

    let centred = sphere(&VerifyOptions { cells_in: opts.static_cells.0, cells_out: opts.static_cells.1, ..opts.clone() }, &[0.0; 3])?;
    let static_spec = ObjectSpec::new(centred.clone(), 1.0, [0.0; 3], 0.0, 2.0, 0.0)?;
    let st = solve_batch(&static_spec, 0, &opts.solve, None)?;
    let (_, n) = mpt_blocks(&st, &static_spec)?;
    let t = polya_szego_tensor(&centred, 2.0)?;
    let tn = t.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut diff: f64 = 0.0;
    for k in 0..3 {
        for j in 0..3 {
            diff = diff.max((n.at(&[k, j]) - C64::new(t[k][j], 0.0)).norm() / tn);
        }
    }
    report.checks.push(CheckResult::at_most("static_limit_polya_szego", diff, 5e-2));

    let cube_fixture = FixtureSpec { far_factor: opts.far_factor, ..FixtureSpec::new(Shape::cube(1.0), 2, opts.cells_out.min(2)) };
    let cube = Arc::new(cube_fixture.build()?);
    let cube_spec = ObjectSpec::new(cube, alpha, [0.0; 3], sigma, mu_r, omega)?;
    let q = rotation_axis_angle(&[0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
    let eq = check_frame_equivariance(&cube_spec, &q, 2, &opts.solve)?;
    report.checks.push(CheckResult::at_most("cube_quarter_turn_equivariance", eq.max(), 1e-8));

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_reduction_matches_library_contraction() {
        let a = DenseTensor::from_fn(4, |o| C64::new((o[0] * 7 + o[1] * 3 + o[2] * 5 + o[3]) as f64 % 5.0 - 2.0, o[0] as f64));
        let skew = DenseTensor::from_fn(4, |o| {
            let mut sw = o.to_vec();
            sw.swap(0, 2);
            a.at(o) - a.at(&sw)
        });
        let lib = skew.contract_skew(0, 2).unwrap().contract_skew(1, 0).unwrap();
        assert!(rel(&reduce_with(&skew, true_epsilon), &lib) < 1e-15);
        assert!(rel(&reduce_with(&skew, tampered_epsilon), &lib) > 1e-3);
    }

    #[test]
    fn algebraic_checks_pass() {
        let mut r = VerifyReport::default();
        algebraic_checks(&mut r);
        assert!(r.passed(), "{}", r.to_table());
    }
}
