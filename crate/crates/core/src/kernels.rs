//! Free-space Laplace Green's function G(x,z) = 1/(4π|x−z|) and its
//! derivative tensors with respect to x.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use crate::linalg::{norm, sub, Vec3};
use crate::tensor::{DenseTensor, C64};

pub const COINCIDENCE_TOL: f64 = 1e-14;
pub const DEFAULT_MAX_ORDER: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub enum KernelError {
    CoincidentPoints { distance: f64 },
    OrderTooLarge { order: usize, max: usize },
}

impl fmt::Display for KernelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelError::CoincidentPoints { distance } => {
                write!(f, "source and field points coincide (|x − z| = {distance:.3e})")
            }
            KernelError::OrderTooLarge { order, max } => {
                write!(f, "derivative order {order} exceeds the configured maximum {max}")
            }
        }
    }
}

impl core::error::Error for KernelError {}

fn separation(x: &Vec3, z: &Vec3) -> Result<(Vec3, f64), KernelError> {
    let r = sub(x, z);
    let d = norm(&r);
    if !(d >= COINCIDENCE_TOL) {
        return Err(KernelError::CoincidentPoints { distance: d });
    }
    Ok((r, d))
}

pub fn green(x: &Vec3, z: &Vec3) -> Result<f64, KernelError> {
    let (_, d) = separation(x, z)?;
    Ok(1.0 / (4.0 * PI * d))
}

/// Closed-form Hessian (3 r̂⊗r̂ − I)/(4π|r|³).
pub fn green_hessian(x: &Vec3, z: &Vec3) -> Result<DenseTensor, KernelError> {
    let (r, d) = separation(x, z)?;
    let f = 1.0 / (4.0 * PI * d * d * d);
    Ok(DenseTensor::from_fn(2, |o| {
        let delta = if o[0] == o[1] { 1.0 } else { 0.0 };
        C64::new(f * (3.0 * r[o[0]] * r[o[1]] / (d * d) - delta), 0.0)
    }))
}

/// q-th derivative tensor of G with respect to x, limited to the default maximum order.
pub fn green_deriv(x: &Vec3, z: &Vec3, q: usize) -> Result<DenseTensor, KernelError> {
    green_deriv_with_limit(x, z, q, DEFAULT_MAX_ORDER)
}

/// q-th derivative tensor of G with an explicit order limit.
///
/// Uses ∂_{i1..iq} |r|⁻¹ = Σ_k (−1)^{q−k} (2q−2k−1)!! |r|^{−(2q−2k+1)} S_k, where S_k
/// sums, over all ways of choosing k disjoint index pairs, the product of a Kronecker
/// delta per pair and r_i for every unpaired index.
pub fn green_deriv_with_limit(
    x: &Vec3,
    z: &Vec3,
    q: usize,
    limit: usize,
) -> Result<DenseTensor, KernelError> {
    if q > limit {
        return Err(KernelError::OrderTooLarge { order: q, max: limit });
    }
    let (r, d) = separation(x, z)?;
    // radial factors c_k = (−1)^{q−k} (2q−2k−1)!! / |r|^{2q−2k+1}
    let coeff: Vec<f64> = (0..=q / 2)
        .map(|k| {
            let n = q - k;
            let sign = if n.is_multiple_of(2) { 1.0 } else { -1.0 };
            sign * double_factorial(2 * n) / libm::pow(d, (2 * n + 1) as f64)
        })
        .collect();
    // values depend only on how many times each axis occurs
    let mut cache: Vec<Option<f64>> = vec![None; (q + 1) * (q + 1) * (q + 1)];
    let scale = 1.0 / (4.0 * PI);
    Ok(DenseTensor::from_fn(q, |offsets| {
        let mut counts = [0usize; 3];
        for &o in offsets {
            counts[o] += 1;
        }
        let key = (counts[0] * (q + 1) + counts[1]) * (q + 1) + counts[2];
        let value = *cache[key].get_or_insert_with(|| {
            let mut sorted: Vec<usize> = offsets.to_vec();
            sorted.sort_unstable();
            let mut sums = vec![0.0; q / 2 + 1];
            pairing_sums(&sorted, &r, 1.0, 0, &mut sums);
            sums.iter().zip(&coeff).map(|(s, c)| s * c).sum::<f64>() * scale
        });
        C64::new(value, 0.0)
    }))
}

/// (2n − 1)!! for the argument `two_n` = 2n; equals 1 for n = 0.
fn double_factorial(two_n: usize) -> f64 {
    let mut acc = 1.0;
    let mut k = two_n.saturating_sub(1);
    while k > 1 {
        acc *= k as f64;
        k -= 2;
    }
    acc
}

/// Accumulate S_k for every k by recursing over the first remaining index.
fn pairing_sums(rest: &[usize], r: &Vec3, product: f64, pairs: usize, sums: &mut [f64]) {
    if product == 0.0 {
        return;
    }
    let Some((&first, tail)) = rest.split_first() else {
        sums[pairs] += product;
        return;
    };
    pairing_sums(tail, r, product * r[first], pairs, sums);
    for (n, &other) in tail.iter().enumerate() {
        if other == first {
            let mut remaining: Vec<usize> = Vec::with_capacity(tail.len() - 1);
            remaining.extend_from_slice(&tail[..n]);
            remaining.extend_from_slice(&tail[n + 1..]);
            pairing_sums(&remaining, r, product, pairs + 1, sums);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn green_values() {
        let z = [0.0; 3];
        assert!((green(&[1.0, 0.0, 0.0], &z).unwrap() - 0.079_577_471_545_947_67).abs() < 1e-15);
        assert!((green(&[0.0, 2.0, 0.0], &z).unwrap() - 1.0 / (8.0 * PI)).abs() < 1e-15);
        assert!(matches!(green(&z, &z), Err(KernelError::CoincidentPoints { .. })));
    }

    #[test]
    fn hessian_closed_form_examples() {
        let h = green_hessian(&[1.0, 0.0, 0.0], &[0.0; 3]).unwrap();
        let f = 1.0 / (4.0 * PI);
        for (i, v) in [2.0, -1.0, -1.0].iter().enumerate() {
            assert!((h.at(&[i, i]).re - f * v).abs() < 1e-15);
        }
        let h = green_hessian(&[0.0, 0.0, 3.0], &[0.0; 3]).unwrap();
        let f = 1.0 / (4.0 * PI * 27.0);
        for (i, v) in [-1.0, -1.0, 2.0].iter().enumerate() {
            assert!((h.at(&[i, i]).re - f * v).abs() < 1e-16);
        }
    }

    #[test]
    fn order_limit() {
        assert!(matches!(
            green_deriv(&[1.0, 0.0, 0.0], &[0.0; 3], 7),
            Err(KernelError::OrderTooLarge { order: 7, max: 6 })
        ));
        assert!(green_deriv_with_limit(&[1.0, 0.0, 0.0], &[0.0; 3], 7, 8).is_ok());
    }

    #[test]
    fn double_factorials() {
        assert_eq!(double_factorial(0), 1.0);
        assert_eq!(double_factorial(2), 1.0);
        assert_eq!(double_factorial(4), 3.0);
        assert_eq!(double_factorial(8), 105.0);
    }
}
