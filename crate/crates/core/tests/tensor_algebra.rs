use gmpt_core::linalg::{mat_mul, rotation_from_vector, transpose, Mat3};
use gmpt_core::tensor::{monomial, pow3, DenseTensor, MultiIndex, C64};
use proptest::prelude::*;

fn rotation() -> impl Strategy<Value = Mat3> {
    prop::array::uniform3(-3.0f64..3.0).prop_map(|w| rotation_from_vector(&w))
}

fn tensor(rank: usize) -> impl Strategy<Value = DenseTensor> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), pow3(rank)).prop_map(move |v| {
        DenseTensor::from_vec(rank, v.into_iter().map(|(a, b)| C64::new(a, b)).collect()).unwrap()
    })
}

proptest! {
    #[test]
    fn transform_round_trip(t in tensor(2), q in rotation()) {
        let back = t.transform(&q).unwrap().transform(&transpose(&q)).unwrap();
        prop_assert!(back.sub(&t).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn transform_composes(t in tensor(3), q1 in rotation(), q2 in rotation()) {
        let lhs = t.transform(&mat_mul(&q1, &q2)).unwrap();
        let rhs = t.transform(&q2).unwrap().transform(&q1).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn identity_transform_is_exact(t in tensor(4)) {
        let out = t.transform(&gmpt_core::linalg::IDENTITY).unwrap();
        prop_assert_eq!(out, t);
    }

    #[test]
    fn monomial_is_permutation_invariant(xi in prop::array::uniform3(-2.0f64..2.0), labels in prop::collection::vec(1u8..=3, 0..6)) {
        let j = MultiIndex::new(&labels).unwrap();
        let mut rev = labels.clone();
        rev.reverse();
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        let a = monomial(&xi, &j);
        let b = monomial(&xi, &MultiIndex::new(&rev).unwrap());
        prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        let c = monomial(&xi, &MultiIndex::new(&sorted).unwrap());
        prop_assert!((a - c).abs() <= 1e-15 * a.abs().max(1.0));
    }

    #[test]
    fn skew_contraction_inverts_expansion(t in tensor(3), a in 0usize..4, b in 0usize..4) {
        prop_assume!(a != b);
        let expanded = t.expand_skew(a, b).unwrap();
        let back = expanded.contract_skew(a, b).unwrap();
        prop_assert!(back.sub(&t).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn json_round_trip_is_bit_exact(t in tensor(3)) {
        let text = serde_json::to_string(&t).unwrap();
        let back: DenseTensor = serde_json::from_str(&text).unwrap();
        for (x, y) in t.data().iter().zip(back.data()) {
            prop_assert_eq!(x.re.to_bits(), y.re.to_bits());
            prop_assert_eq!(x.im.to_bits(), y.im.to_bits());
        }
    }
}

#[test]
fn rotation_about_z_permutes_axes() {
    let q = gmpt_core::linalg::rotation_axis_angle(&[0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
    let e1 = DenseTensor::from_real(1, &[1.0, 0.0, 0.0]).unwrap();
    let out = e1.transform(&q).unwrap();
    assert!((out.data()[0]).norm() < 1e-15);
    assert!((out.data()[1].re.abs() - 1.0).abs() < 1e-15);
}

#[test]
fn json_layout() {
    let t = DenseTensor::from_vec(1, vec![C64::new(1.0, 0.5), C64::new(0.0, 0.0), C64::new(-2.0, 0.0)]).unwrap();
    let text = serde_json::to_string(&t).unwrap();
    assert_eq!(text, r#"{"rank":1,"data":[[1.0,0.5],[0.0,0.0],[-2.0,0.0]]}"#);
    let bad = r#"{"rank":2,"data":[[1.0,0.0]]}"#;
    assert!(serde_json::from_str::<DenseTensor>(bad).is_err());
}
