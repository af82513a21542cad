use gmpt_core::kernels::green_hessian;
use gmpt_core::polyfield::{Polynomial, VectorPolynomial};
use gmpt_core::tensor::{DenseTensor, C64};
use gmpt_core::{dipole_field, taylor_background, BackgroundModel, PolyField, Vec3};
use proptest::prelude::*;

// Polynomial calculus on monomial bases, written independently of the
// Taylor-form code paths.

fn derivative(p: &Polynomial, axis: usize) -> Polynomial {
    let mut out = Polynomial::new();
    for (exps, c) in p {
        if exps[axis] == 0 {
            continue;
        }
        let mut e = *exps;
        e[axis] -= 1;
        *out.entry(e).or_insert(C64::new(0.0, 0.0)) += c * f64::from(exps[axis]);
    }
    out
}

fn combine(a: &Polynomial, b: &Polynomial, sb: f64) -> Polynomial {
    let mut out = a.clone();
    for (e, c) in b {
        *out.entry(*e).or_insert(C64::new(0.0, 0.0)) += c * sb;
    }
    out
}

fn curl(v: &VectorPolynomial) -> VectorPolynomial {
    let d = |i: usize, axis: usize| derivative(&v.components[i], axis);
    VectorPolynomial {
        center: v.center,
        components: [
            combine(&d(2, 1), &d(1, 2), -1.0),
            combine(&d(0, 2), &d(2, 0), -1.0),
            combine(&d(1, 0), &d(0, 1), -1.0),
        ],
    }
}

fn max_coefficient_gap(a: &VectorPolynomial, b: &VectorPolynomial) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for (e, c) in &a.components[i] {
            worst = worst.max((c - b.coefficient(i, *e)).norm());
        }
        for (e, c) in &b.components[i] {
            worst = worst.max((c - a.coefficient(i, *e)).norm());
        }
    }
    worst
}

/// Taylor form to monomial form by direct expansion of Σ_p 1/p! T Π(y).
fn to_monomials(s: &PolyField) -> VectorPolynomial {
    let mut v = VectorPolynomial::zero(s.center());
    for (p, block) in s.coeffs().iter().enumerate() {
        let w: f64 = 1.0 / (1..=p).map(|k| k as f64).product::<f64>();
        for (n, c) in block.data().iter().enumerate() {
            let mut digits = vec![0usize; p + 1];
            let mut m = n;
            for slot in (0..=p).rev() {
                digits[slot] = m % 3;
                m /= 3;
            }
            let mut e = [0u8; 3];
            for &o in &digits[1..] {
                e[o] += 1;
            }
            v.add_term(digits[0], e, c * w);
        }
    }
    v
}

fn potential(degree: usize) -> impl Strategy<Value = VectorPolynomial> {
    let mut monos = Vec::new();
    for a in 0..=degree as u8 {
        for b in 0..=degree as u8 - a {
            for c in 0..=degree as u8 - a - b {
                monos.push([a, b, c]);
            }
        }
    }
    let n = monos.len();
    prop::collection::vec(-1.0f64..1.0, 3 * n).prop_map(move |coef| {
        let mut v = VectorPolynomial::zero([0.3, -0.1, 0.2]);
        for (k, c) in coef.into_iter().enumerate() {
            v.add_term(k / n, monos[k % n], C64::new(c, 0.0));
        }
        v
    })
}

proptest! {
    #[test]
    fn uncurl_is_a_coefficientwise_identity(a in potential(5)) {
        // s = ∇×a is divergence free with degree ≤ 4
        let s_mono = curl(&a);
        let s = PolyField::from_vector_polynomial(&s_mono).unwrap();
        prop_assert!(s.divergence_defect() < 1e-12);
        let t = s.uncurl().unwrap();
        let curl_t = curl(&t);
        prop_assert!(max_coefficient_gap(&curl_t, &s_mono) < 1e-12);
        prop_assert!(max_coefficient_gap(&to_monomials(&s), &s_mono) < 1e-12);
    }

    #[test]
    fn dipole_taylor_blocks_are_symmetric(z in prop::array::uniform3(-0.5f64..0.5), m in prop::array::uniform3(-1.0f64..1.0)) {
        let bg = BackgroundModel::Dipole { position: [0.0, 0.0, 2.5], moment: m };
        let f = taylor_background(&bg, &z, 4).unwrap();
        for (p, block) in f.coeffs().iter().enumerate() {
            prop_assert!(block.symmetry_defect(1, p) <= 1e-12 * block.max_abs().max(1e-300));
        }
        prop_assert!(f.divergence_defect() < 1e-10);
    }
}

#[test]
fn uncurl_random_quadratic_matches_symbolic_curl() {
    // explicit quadratic: s = ∇×a for a = (y² z, x z², x² y)
    let mut a = VectorPolynomial::zero([0.0; 3]);
    a.add_term(0, [0, 2, 1], C64::new(1.0, 0.0));
    a.add_term(1, [1, 0, 2], C64::new(1.0, 0.0));
    a.add_term(2, [2, 1, 0], C64::new(1.0, 0.0));
    let s_mono = curl(&a);
    let s = PolyField::from_vector_polynomial(&s_mono).unwrap();
    assert_eq!(s.degree(), 2);
    let t = s.uncurl().unwrap();
    assert!(max_coefficient_gap(&curl(&t), &s_mono) < 1e-13);
}

#[test]
fn dipole_taylor_zeroth_order_is_hessian_contraction() {
    let y = [0.2, -1.0, 3.0];
    let m = [0.3, 0.5, -1.0];
    let z = [0.1, 0.0, -0.2];
    let f = taylor_background(&BackgroundModel::Dipole { position: y, moment: m }, &z, 2).unwrap();
    let h = green_hessian(&z, &y).unwrap();
    let p0 = f.block(0).as_vector().unwrap();
    for i in 0..3 {
        let expect: f64 = (0..3).map(|j| h.at(&[i, j]).re * m[j]).sum();
        assert!((p0[i].re - expect).abs() < 1e-15);
    }
}

#[test]
fn dipole_taylor_first_order_matches_finite_differences() {
    let y = [0.0, 0.5, 2.0];
    let m = [0.0, 0.2, 1.0];
    let z = [0.1, -0.1, 0.0];
    let f = taylor_background(&BackgroundModel::Dipole { position: y, moment: m }, &z, 1).unwrap();
    let d1 = f.block(1);
    let h = 1e-5;
    for k in 0..3 {
        let mut zp = z;
        zp[k] += h;
        let mut zm = z;
        zm[k] -= h;
        let (hp, hm) = (dipole_field(&y, &m, &zp).unwrap(), dipole_field(&y, &m, &zm).unwrap());
        for i in 0..3 {
            let fd = (hp[i] - hm[i]) / (2.0 * h);
            assert!((d1.at(&[i, k]).re - fd).abs() <= 1e-6 * d1.max_abs());
        }
    }
}

#[test]
fn dipole_field_properties() {
    let y = [1.0, 2.0, 3.0];
    assert_eq!(dipole_field(&y, &[0.0; 3], &[0.0; 3]).unwrap(), [0.0; 3]);
    let on_axis = dipole_field(&[0.0; 3], &[0.0, 0.0, 2.0], &[0.0, 0.0, 5.0]).unwrap();
    assert!(on_axis[0].abs() < 1e-18 && on_axis[1].abs() < 1e-18 && on_axis[2] > 0.0);
    assert!(dipole_field(&y, &[1.0, 0.0, 0.0], &y).is_err());
}

/// Solve a small dense real system by Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

#[test]
fn dipole_samples_fit_to_degree_two_are_reproduced() {
    let y = [0.0, 0.0, 3.0];
    let m = [0.1, 0.0, 1.0];
    let z = [0.0; 3];
    // basis: 1, y_k, y_k y_l (k ≤ l) → 10 functions; 10 sample points
    let pairs: Vec<(usize, usize)> = (0..3).flat_map(|k| (k..3).map(move |l| (k, l))).collect();
    let basis = |p: &Vec3| {
        let mut row = vec![1.0, p[0], p[1], p[2]];
        row.extend(pairs.iter().map(|&(k, l)| p[k] * p[l]));
        row
    };
    let pts: Vec<Vec3> = (0..10)
        .map(|n| {
            let t = n as f64;
            [0.3 * (1.3 * t).sin(), 0.3 * (0.7 * t + 0.4).cos(), 0.25 * (2.1 * t + 1.0).sin()]
        })
        .collect();
    let samples: Vec<Vec3> = pts.iter().map(|p| dipole_field(&y, &m, p).unwrap()).collect();
    let a: Vec<Vec<f64>> = pts.iter().map(basis).collect();
    let mut blocks = vec![DenseTensor::zeros(1), DenseTensor::zeros(2), DenseTensor::zeros(3)];
    for j in 0..3 {
        let c = solve_dense(a.clone(), samples.iter().map(|s| s[j]).collect());
        *blocks[0].at_mut(&[j]) = C64::new(c[0], 0.0);
        for k in 0..3 {
            *blocks[1].at_mut(&[j, k]) = C64::new(c[1 + k], 0.0);
        }
        for (n, &(k, l)) in pairs.iter().enumerate() {
            // Σ_{kl} ½ T_{jkl} y_k y_l: off-diagonal pairs appear twice
            let v = if k == l { 2.0 * c[4 + n] } else { c[4 + n] };
            *blocks[2].at_mut(&[j, k, l]) = C64::new(v, 0.0);
            *blocks[2].at_mut(&[j, l, k]) = C64::new(v, 0.0);
        }
    }
    let fit = PolyField::new(z, blocks).unwrap();
    for (p, s) in pts.iter().zip(&samples) {
        let v = fit.eval(p);
        for j in 0..3 {
            assert!((v[j].re - s[j]).abs() < 1e-10 * s.iter().map(|x| x.abs()).fold(0.0, f64::max));
        }
    }
}

#[test]
fn dipole_truncation_error_decays_with_degree() {
    let y = [0.3, -0.2, 2.0];
    let m = [0.2, 0.4, 1.0];
    let z = [0.0; 3];
    let bg = BackgroundModel::Dipole { position: y, moment: m };
    // sample directions on the ball boundary and interior
    let dirs: Vec<Vec3> = (0..40)
        .map(|n| {
            let t = n as f64 + 0.5;
            let c = 1.0 - 2.0 * t / 40.0;
            let s = (1.0 - c * c).sqrt();
            let phi = t * 2.399_963_229_728_653;
            [s * phi.cos(), s * phi.sin(), c]
        })
        .collect();
    for degree in 0..=3 {
        let f = taylor_background(&bg, &z, degree).unwrap();
        let alphas = [0.02, 0.04, 0.08];
        let errs: Vec<f64> = alphas
            .iter()
            .map(|&a| {
                dirs.iter()
                    .flat_map(|d| [0.5, 1.0].map(|r| d.map(|v| v * r * a)))
                    .map(|x| {
                        let exact = dipole_field(&y, &m, &x).unwrap();
                        let approx = f.eval(&x);
                        (0..3).map(|i| (approx[i].re - exact[i]).abs()).fold(0.0, f64::max)
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        let n = alphas.len() as f64;
        let lx: Vec<f64> = alphas.iter().map(|a| a.ln()).collect();
        let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let mx = lx.iter().sum::<f64>() / n;
        let my = ly.iter().sum::<f64>() / n;
        let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope - (degree as f64 + 1.0)).abs() < 0.3, "degree {degree}: slope {slope}");
    }
}

#[test]
fn poly_field_json_round_trip() {
    let s = PolyField::new(
        [0.1, 0.2, 0.3],
        vec![DenseTensor::from_real(1, &[1.0, 2.0, 3.0]).unwrap(), DenseTensor::zeros(2)],
    )
    .unwrap();
    let text = serde_json::to_string(&s).unwrap();
    assert!(text.contains("\"center\"") && text.contains("\"blocks\""));
    let back: PolyField = serde_json::from_str(&text).unwrap();
    assert_eq!(back, s);
}
