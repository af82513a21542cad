use gmpt_core::kernels::{green, green_deriv, green_deriv_with_limit, green_hessian};
use gmpt_core::tensor::DenseTensor;
use gmpt_core::Vec3;
use proptest::prelude::*;

fn shifted(x: &Vec3, axis: usize, h: f64) -> Vec3 {
    let mut y = *x;
    y[axis] += h;
    y
}

#[test]
fn hessian_matches_finite_differences_of_green() {
    let z = [0.1, -0.2, 0.05];
    let h = 1e-5;
    for x in [[1.0, 0.0, 0.0], [0.1, -0.2, 3.05], [0.7, 0.4, -0.9]] {
        let hess = green_hessian(&x, &z).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let fd = (green(&shifted(&shifted(&x, i, h), j, h), &z).unwrap()
                    - green(&shifted(&shifted(&x, i, h), j, -h), &z).unwrap()
                    - green(&shifted(&shifted(&x, i, -h), j, h), &z).unwrap()
                    + green(&shifted(&shifted(&x, i, -h), j, -h), &z).unwrap())
                    / (4.0 * h * h);
                let exact = hess.at(&[i, j]).re;
                let scale = hess.max_abs();
                assert!((fd - exact).abs() < 1e-6 * scale, "x={x:?} ({i},{j}) fd={fd} exact={exact}");
            }
        }
    }
}

#[test]
fn low_orders_are_consistent() {
    let x = [0.3, 1.2, -0.4];
    let z = [-0.5, 0.1, 0.2];
    let g0 = green_deriv(&x, &z, 0).unwrap();
    assert_eq!(g0.rank(), 0);
    assert!((g0.data()[0].re - green(&x, &z).unwrap()).abs() < 1e-16);
    let g2 = green_deriv(&x, &z, 2).unwrap();
    assert!(g2.sub(&green_hessian(&x, &z).unwrap()).unwrap().max_abs() < 1e-14);
}

#[test]
fn third_order_matches_finite_differences_of_hessian() {
    let z = [0.0; 3];
    let h = 1e-5;
    for x in [[0.9, -0.3, 0.5], [-0.2, 0.4, 1.1]] {
        let g3 = green_deriv(&x, &z, 3).unwrap();
        for k in 0..3 {
            let plus = green_hessian(&shifted(&x, k, h), &z).unwrap();
            let minus = green_hessian(&shifted(&x, k, -h), &z).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (plus.at(&[i, j]).re - minus.at(&[i, j]).re) / (2.0 * h);
                    let exact = g3.at(&[i, j, k]).re;
                    assert!((fd - exact).abs() <= 1e-5 * g3.max_abs());
                }
            }
        }
    }
}

#[test]
fn each_order_is_the_gradient_of_the_previous() {
    let z = [0.2, 0.1, -0.3];
    let x = [1.1, -0.6, 0.4];
    let h = 1e-4;
    for q in 3..=7 {
        let g = green_deriv_with_limit(&x, &z, q, 8).unwrap();
        for k in 0..3 {
            let p = green_deriv_with_limit(&shifted(&x, k, h), &z, q - 1, 8).unwrap();
            let m = green_deriv_with_limit(&shifted(&x, k, -h), &z, q - 1, 8).unwrap();
            let p2 = green_deriv_with_limit(&shifted(&x, k, 2.0 * h), &z, q - 1, 8).unwrap();
            let m2 = green_deriv_with_limit(&shifted(&x, k, -2.0 * h), &z, q - 1, 8).unwrap();
            for (n, ((a, b), (c, d))) in p.data().iter().zip(m.data()).zip(p2.data().iter().zip(m2.data())).enumerate() {
                let fd = (8.0 * (a.re - b.re) - (c.re - d.re)) / (12.0 * h);
                let exact = g.data()[n * 3 + k].re;
                assert!((fd - exact).abs() <= 1e-7 * g.max_abs(), "q={q}");
            }
        }
    }
}

fn trace_defect(t: &DenseTensor) -> f64 {
    let mut worst: f64 = 0.0;
    for a in 0..t.rank() {
        for b in a + 1..t.rank() {
            worst = worst.max(t.trace(a, b).unwrap().max_abs());
        }
    }
    worst
}

fn point() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-2.0f64..2.0)
}

proptest! {
    #[test]
    fn derivative_tensors_are_fully_symmetric(x in point(), z in point(), q in 0usize..=5) {
        prop_assume!(gmpt_core::linalg::norm(&gmpt_core::linalg::sub(&x, &z)) > 0.1);
        let g = green_deriv(&x, &z, q).unwrap();
        prop_assert!(g.symmetry_defect(0, q) <= 1e-13 * g.max_abs().max(1e-300));
    }

    #[test]
    fn derivative_tensors_are_traceless(x in point(), z in point(), q in 2usize..=6) {
        prop_assume!(gmpt_core::linalg::norm(&gmpt_core::linalg::sub(&x, &z)) > 0.1);
        let g = green_deriv(&x, &z, q).unwrap();
        prop_assert!(trace_defect(&g) <= 1e-12 * g.max_abs());
    }

    #[test]
    fn derivative_tensors_are_homogeneous(x in point(), z in point(), q in 0usize..=6, lambda in 0.1f64..10.0) {
        prop_assume!(gmpt_core::linalg::norm(&gmpt_core::linalg::sub(&x, &z)) > 0.1);
        let g = green_deriv(&x, &z, q).unwrap();
        let gs = green_deriv(&x.map(|v| v * lambda), &z.map(|v| v * lambda), q).unwrap();
        let factor = lambda.powi(-(1 + q as i32));
        let expect = g.scaled(gmpt_core::C64::new(factor, 0.0));
        prop_assert!(gs.sub(&expect).unwrap().max_abs() <= 1e-12 * expect.max_abs());
    }
}
