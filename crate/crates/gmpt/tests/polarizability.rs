use std::sync::{Arc, OnceLock};

use gmpt::fixtures::{FixtureSpec, Shape};
use gmpt::mesh::{ObjectSpec, MU0};
use gmpt::polarizability::{
    assemble_a, assemble_c, assemble_set, mpt, mpt_blocks, reduce_a_to_c, set_from_thetas, skew_defect, GmptSet,
};
use gmpt::transmission::{solve_batch, SolveConfig, ThetaSet};
use gmpt_core::linalg::{mat_mul, rotation_from_vector};
use gmpt_core::tensor::epsilon;
use gmpt_core::DenseTensor;
use num_complex::Complex64 as C64;
use proptest::prelude::*;

const ALPHA: f64 = 0.01;
const OMEGA: f64 = 1.0e4;

fn spec(shape: Shape, cells: usize, shift: [f64; 3], nu: f64, mu_r: f64) -> ObjectSpec {
    let mesh = FixtureSpec::new(shape, cells, cells).build().unwrap().translated_scaled(&shift, 1.0).unwrap();
    let sigma = nu / (OMEGA * MU0 * ALPHA * ALPHA);
    ObjectSpec::new(Arc::new(mesh), ALPHA, [0.0; 3], sigma, mu_r, OMEGA).unwrap()
}

fn shifted_sphere() -> &'static (ObjectSpec, ThetaSet) {
    static CELL: OnceLock<(ObjectSpec, ThetaSet)> = OnceLock::new();
    CELL.get_or_init(|| {
        let s = spec(Shape::Sphere { radius: 1.0 }, 2, [0.25, 0.15, 0.1], 1.0, 2.0);
        let t = solve_batch(&s, 1, &SolveConfig::default(), None).unwrap();
        (s, t)
    })
}

fn order_two_set() -> &'static GmptSet {
    static CELL: OnceLock<GmptSet> = OnceLock::new();
    CELL.get_or_init(|| {
        let (s, t) = shifted_sphere();
        set_from_thetas(t, s, 2).unwrap()
    })
}

fn rel(a: &DenseTensor, b: &DenseTensor) -> f64 {
    a.sub(b).unwrap().norm() / a.norm().max(b.norm())
}

#[test]
fn cube_mpt_is_isotropic() {
    let m = mpt(&spec(Shape::cube(1.0), 2, [0.0; 3], 1.0, 2.0), &SolveConfig::default()).unwrap();
    let m = m.as_matrix().unwrap();
    let d = m[0][0];
    assert!(d.norm() > 0.0);
    for i in 0..3 {
        for j in 0..3 {
            let expect = if i == j { d } else { C64::new(0.0, 0.0) };
            assert!((m[i][j] - expect).norm() < 1e-9 * d.norm(), "[{i}][{j}] {:?}", m[i][j]);
        }
    }
}

#[test]
fn mpt_is_complex_symmetric() {
    let (s, t) = shifted_sphere();
    let (c, n) = mpt_blocks(t, s).unwrap();
    let m = n.sub(&c).unwrap().as_matrix().unwrap();
    let scale = m.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max);
    for i in 0..3 {
        for j in 0..3 {
            assert!((m[i][j] - m[j][i]).norm() < 1e-9 * scale);
        }
    }
}

#[test]
fn static_object_has_no_eddy_current_part() {
    let mesh = FixtureSpec::new(Shape::cube(1.0), 2, 2).build().unwrap();
    let s = ObjectSpec::new(Arc::new(mesh), ALPHA, [0.0; 3], 0.0, 3.0, 0.0).unwrap();
    let set = assemble_set(&s, 1, &SolveConfig::default()).unwrap();
    let b = set.block(0, 0).unwrap();
    assert_eq!(b.c.norm(), 0.0);
    assert!(b.n.norm() > 0.0);
}

#[test]
fn a_is_skew_and_reduces_to_c() {
    let (s, t) = shifted_sphere();
    for (m, p) in [(0, 0), (1, 0), (0, 1)] {
        let a = assemble_a(t, s, m, p).unwrap();
        let c = assemble_c(t, s, m, p).unwrap();
        assert!(skew_defect(&a, 0, 2).unwrap() < 1e-12);
        assert!(rel(&reduce_a_to_c(&a).unwrap(), &c) < 1e-12, "({m},{p})");
    }
}

#[test]
fn reduction_matches_explicit_alternating_sums() {
    let (s, t) = shifted_sphere();
    let a = assemble_a(t, s, 1, 0).unwrap();
    let explicit = DenseTensor::from_fn(3, |o| {
        let mut acc = C64::new(0.0, 0.0);
        for l in 0..3 {
            for r in 0..3 {
                for i in 0..3 {
                    for q in 0..3 {
                        let e = f64::from(epsilon(o[0], l, r) * epsilon(r, i, q));
                        if e != 0.0 {
                            acc += a.at(&[i, l, q, o[1], o[2]]) * (0.25 * e);
                        }
                    }
                }
            }
        }
        acc
    });
    assert!(rel(&reduce_a_to_c(&a).unwrap(), &explicit) < 1e-14);
}

#[test]
fn set_validates_and_round_trips_through_json() {
    let set = order_two_set();
    set.validate().unwrap();
    assert_eq!(set.blocks.len(), 3);
    let back = GmptSet::from_json(&set.to_json()).unwrap();
    assert_eq!(&back, set);
    let mut broken = set.clone();
    broken.blocks.pop();
    assert!(broken.validate().is_err());
}

#[test]
fn blocks_scale_with_object_size_at_fixed_nu() {
    let (s, t) = shifted_sphere();
    let base = order_two_set();
    let scaled = set_from_thetas(t, &s.with_alpha_fixed_nu(3.0 * ALPHA), 2).unwrap();
    for b in &base.blocks {
        let f = 3f64.powi((3 + b.m + b.p) as i32);
        let expect = b.combined().scaled(C64::new(f, 0.0));
        assert!(rel(&expect, &scaled.block(b.m, b.p).unwrap().combined()) < 1e-12);
    }
}

#[test]
fn missing_theta_orders_are_reported() {
    let (s, t) = shifted_sphere();
    assert!(set_from_thetas(t, s, 3).is_err());
    assert!(assemble_set(s, 0, &SolveConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn transforms_compose(a in prop::array::uniform3(-2.0f64..2.0), b in prop::array::uniform3(-2.0f64..2.0)) {
        let set = order_two_set();
        let (qa, qb) = (rotation_from_vector(&a), rotation_from_vector(&b));
        let twice = set.transformed(&qa).unwrap().transformed(&qb).unwrap();
        let once = set.transformed(&mat_mul(&qb, &qa)).unwrap();
        for blk in &once.blocks {
            prop_assert!(rel(&blk.combined(), &twice.block(blk.m, blk.p).unwrap().combined()) < 1e-12);
        }
    }

    #[test]
    fn rotation_preserves_block_norms(w in prop::array::uniform3(-3.0f64..3.0)) {
        let set = order_two_set();
        let r = set.transformed(&rotation_from_vector(&w)).unwrap();
        for blk in &set.blocks {
            let n0 = blk.combined().norm();
            let n1 = r.block(blk.m, blk.p).unwrap().combined().norm();
            prop_assert!((n0 - n1).abs() < 1e-12 * n0);
        }
    }
}
