//! Polynomial vector fields in Taylor form, their uncurling, and Taylor data of
//! background fields.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::kernels::{green_deriv_with_limit, green_hessian, KernelError};
use crate::linalg::{norm, sub, Vec3};
use crate::tensor::{enumerate_multiindices, monomial_offsets, DenseTensor, TensorError, C64};

/// Divergence tolerance on coefficient contractions.
pub const DIVERGENCE_TOL: f64 = 1e-10;
/// Default maximum Taylor degree.
pub const DEFAULT_DEGREE_CAP: usize = 5;
/// Minimum distance between an expansion centre and a dipole source.
pub const SINGULAR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum PolyError {
    NotDivergenceFree { defect: f64 },
    SingularBackground { distance: f64 },
    DegreeTooLarge { degree: usize, cap: usize },
    Tensor(TensorError),
    Kernel(KernelError),
}

impl fmt::Display for PolyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolyError::NotDivergenceFree { defect } => {
                write!(f, "field is not divergence free (defect {defect:.3e})")
            }
            PolyError::SingularBackground { distance } => {
                write!(f, "expansion centre is {distance:.3e} from the dipole source")
            }
            PolyError::DegreeTooLarge { degree, cap } => {
                write!(f, "Taylor degree {degree} exceeds the cap {cap}")
            }
            PolyError::Tensor(e) => write!(f, "{e}"),
            PolyError::Kernel(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for PolyError {}

impl From<TensorError> for PolyError {
    fn from(e: TensorError) -> Self {
        PolyError::Tensor(e)
    }
}

impl From<KernelError> for PolyError {
    fn from(e: KernelError) -> Self {
        PolyError::Kernel(e)
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Vector polynomial s(x) = Σ_p (1/p!) (D^p s(z))_{[j,J(p)]} Π(x−z)_{J(p)} e_j.
///
/// `coeffs[p]` has rank p+1: slot 0 is the component, slots 1..=p the
/// differentiation directions (kept symmetric).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PolyField {
    center: Vec3,
    #[cfg_attr(feature = "serde", serde(rename = "blocks"))]
    coeffs: Vec<DenseTensor>,
}

impl PolyField {
    /// Builds a field, symmetrising every block in its differentiation slots.
    pub fn new(center: Vec3, coeffs: Vec<DenseTensor>) -> Result<Self, PolyError> {
        let mut blocks = Vec::with_capacity(coeffs.len());
        for (p, block) in coeffs.into_iter().enumerate() {
            if block.rank() != p + 1 {
                return Err(TensorError::RankMismatch { expected: p + 1, found: block.rank() }.into());
            }
            blocks.push(block.symmetrize(1, p)?);
        }
        Ok(PolyField { center, coeffs: blocks })
    }

    pub fn uniform(center: Vec3, h: [C64; 3]) -> Self {
        PolyField { center, coeffs: alloc::vec![DenseTensor::vector(h)] }
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn coeffs(&self) -> &[DenseTensor] {
        &self.coeffs
    }

    /// Block p, or a zero block when p exceeds the stored degree.
    pub fn block(&self, p: usize) -> DenseTensor {
        self.coeffs.get(p).cloned().unwrap_or_else(|| DenseTensor::zeros(p + 1))
    }

    pub fn eval(&self, x: &Vec3) -> [C64; 3] {
        let y = sub(x, &self.center);
        let mut out = [C64::new(0.0, 0.0); 3];
        for (p, block) in self.coeffs.iter().enumerate() {
            let w = 1.0 / factorial(p);
            for (n, j) in enumerate_multiindices(p + 1).iter().enumerate() {
                let c = block.data()[n];
                if c == C64::new(0.0, 0.0) {
                    continue;
                }
                let offs: Vec<usize> = j.offsets().collect();
                out[offs[0]] += c * (w * monomial_offsets(&y, &offs[1..]));
            }
        }
        out
    }

    /// Largest |Σ_j T[j, .., j@slot, ..]| over all blocks and derivative slots.
    pub fn divergence_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (p, block) in self.coeffs.iter().enumerate().skip(1) {
            for slot in 1..=p {
                if let Ok(tr) = block.trace(0, slot) {
                    worst = worst.max(tr.max_abs());
                }
            }
        }
        worst
    }

    pub fn is_divergence_free(&self) -> bool {
        self.divergence_defect() <= DIVERGENCE_TOL
    }

    /// Same field re-expanded about `center`, keeping the degree.
    pub fn recenter(&self, center: Vec3) -> Result<PolyField, PolyError> {
        let shift = sub(&center, &self.center);
        let shift_vec = DenseTensor::vector([
            C64::new(shift[0], 0.0),
            C64::new(shift[1], 0.0),
            C64::new(shift[2], 0.0),
        ]);
        let mut blocks = Vec::with_capacity(self.coeffs.len());
        for p in 0..self.coeffs.len() {
            let mut acc = DenseTensor::zeros(p + 1);
            for q in p..self.coeffs.len() {
                let mut t = self.coeffs[q].clone();
                for _ in 0..q - p {
                    t = t.contract(&shift_vec, 1)?;
                }
                acc.add_assign_scaled(&t, C64::new(1.0 / factorial(q - p), 0.0))?;
            }
            blocks.push(acc);
        }
        PolyField::new(center, blocks)
    }

    /// Vector potential t with ∇×t = s:
    /// t(x) = Σ_p 1/(p!(p+2)) (D^p s)_{[j,J(p)]} Π(x−z)_{J(p)} e_j × (x−z).
    pub fn uncurl(&self) -> Result<VectorPolynomial, PolyError> {
        let defect = self.divergence_defect();
        if defect > DIVERGENCE_TOL {
            return Err(PolyError::NotDivergenceFree { defect });
        }
        let mut t = VectorPolynomial::zero(self.center);
        for (p, block) in self.coeffs.iter().enumerate() {
            let w = 1.0 / (factorial(p) * (p + 2) as f64);
            for (n, jj) in enumerate_multiindices(p + 1).iter().enumerate() {
                let c = block.data()[n] * w;
                if c == C64::new(0.0, 0.0) {
                    continue;
                }
                let offs: Vec<usize> = jj.offsets().collect();
                let j = offs[0];
                let mut base = [0u8; 3];
                for &o in &offs[1..] {
                    base[o] += 1;
                }
                // (e_j × y)_i = ε_{i j l} y_l
                for i in 0..3 {
                    for l in 0..3 {
                        let e = crate::tensor::epsilon(i, j, l);
                        if e != 0 {
                            let mut exps = base;
                            exps[l] += 1;
                            t.add_term(i, exps, c * f64::from(e));
                        }
                    }
                }
            }
        }
        Ok(t)
    }

    /// Taylor form of a vector polynomial about its own centre.
    pub fn from_vector_polynomial(v: &VectorPolynomial) -> Result<PolyField, PolyError> {
        let degree = v.degree();
        let mut blocks = Vec::with_capacity(degree + 1);
        for p in 0..=degree {
            let block = DenseTensor::from_fn(p + 1, |offs| {
                let mut exps = [0u8; 3];
                for &o in &offs[1..] {
                    exps[o] += 1;
                }
                // ∂^J of c·y^a at 0 is c·a! when the exponents match J
                let c = v.coefficient(offs[0], exps);
                let w: f64 = exps.iter().map(|&a| factorial(a as usize)).product();
                c * w
            });
            blocks.push(block);
        }
        PolyField::new(v.center, blocks)
    }
}

/// Scalar polynomial in monomials y1^a y2^b y3^c.
pub type Polynomial = BTreeMap<[u8; 3], C64>;

/// Vector polynomial in monomials of y = x − center.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorPolynomial {
    pub center: Vec3,
    pub components: [Polynomial; 3],
}

impl VectorPolynomial {
    pub fn zero(center: Vec3) -> Self {
        VectorPolynomial { center, components: [BTreeMap::new(), BTreeMap::new(), BTreeMap::new()] }
    }

    pub fn add_term(&mut self, component: usize, exps: [u8; 3], c: C64) {
        let entry = self.components[component].entry(exps).or_insert(C64::new(0.0, 0.0));
        *entry += c;
    }

    pub fn coefficient(&self, component: usize, exps: [u8; 3]) -> C64 {
        self.components[component].get(&exps).copied().unwrap_or(C64::new(0.0, 0.0))
    }

    pub fn degree(&self) -> usize {
        self.components
            .iter()
            .flat_map(|p| p.keys())
            .map(|e| e.iter().map(|&a| a as usize).sum::<usize>())
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, x: &Vec3) -> [C64; 3] {
        let y = sub(x, &self.center);
        let mut out = [C64::new(0.0, 0.0); 3];
        for (i, poly) in self.components.iter().enumerate() {
            for (exps, c) in poly {
                let m = libm::pow(y[0], f64::from(exps[0]))
                    * libm::pow(y[1], f64::from(exps[1]))
                    * libm::pow(y[2], f64::from(exps[2]));
                out[i] += c * m;
            }
        }
        out
    }

    pub fn scaled(&self, s: C64) -> VectorPolynomial {
        let mut out = self.clone();
        for poly in out.components.iter_mut() {
            for c in poly.values_mut() {
                *c *= s;
            }
        }
        out
    }
}

/// Background magnetic field H₀.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum BackgroundModel {
    Uniform { h: [[f64; 2]; 3] },
    Dipole { position: Vec3, moment: Vec3 },
    Polynomial { field: PolyField },
}

impl BackgroundModel {
    pub fn uniform(h: Vec3) -> Self {
        BackgroundModel::Uniform { h: [[h[0], 0.0], [h[1], 0.0], [h[2], 0.0]] }
    }

    pub fn eval(&self, x: &Vec3) -> Result<[C64; 3], PolyError> {
        match self {
            BackgroundModel::Uniform { h } => Ok(h.map(|p| C64::new(p[0], p[1]))),
            BackgroundModel::Dipole { position, moment } => {
                Ok(dipole_field(position, moment, x)?.map(|v| C64::new(v, 0.0)))
            }
            BackgroundModel::Polynomial { field } => Ok(field.eval(x)),
        }
    }
}

/// Derivative tensors (D_z^p H₀(z)) for p ≤ `degree`.
pub fn taylor_background(
    bg: &BackgroundModel,
    z: &Vec3,
    degree: usize,
) -> Result<PolyField, PolyError> {
    if degree > DEFAULT_DEGREE_CAP {
        return Err(PolyError::DegreeTooLarge { degree, cap: DEFAULT_DEGREE_CAP });
    }
    match bg {
        BackgroundModel::Uniform { h } => {
            let mut blocks = alloc::vec![DenseTensor::vector(h.map(|p| C64::new(p[0], p[1])))];
            blocks.extend((1..=degree).map(|p| DenseTensor::zeros(p + 1)));
            PolyField::new(*z, blocks)
        }
        BackgroundModel::Dipole { position, moment } => {
            let distance = norm(&sub(z, position));
            if distance < SINGULAR_TOL {
                return Err(PolyError::SingularBackground { distance });
            }
            let m = DenseTensor::vector(moment.map(|v| C64::new(v, 0.0)));
            let mut blocks = Vec::with_capacity(degree + 1);
            for p in 0..=degree {
                let g = green_deriv_with_limit(z, position, p + 2, DEFAULT_DEGREE_CAP + 2)?;
                blocks.push(g.contract(&m, 1)?);
            }
            PolyField::new(*z, blocks)
        }
        BackgroundModel::Polynomial { field } => {
            let mut f = field.recenter(*z)?;
            f.coeffs.truncate(degree + 1);
            while f.coeffs.len() < degree + 1 {
                let p = f.coeffs.len();
                f.coeffs.push(DenseTensor::zeros(p + 1));
            }
            Ok(f)
        }
    }
}

/// H₀(x)_i = D²G(x,y)_{ij} m_j.
pub fn dipole_field(y: &Vec3, m: &Vec3, x: &Vec3) -> Result<Vec3, KernelError> {
    let h = green_hessian(x, y)?;
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..3).map(|j| h.at(&[i, j]).re * m[j]).sum();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(x: f64) -> C64 {
        C64::new(x, 0.0)
    }

    #[test]
    fn constant_and_linear_eval() {
        let s = PolyField::uniform([1.0, 2.0, 3.0], [c(1.0), c(0.0), c(0.0)]);
        assert_eq!(s.eval(&[9.0, -4.0, 0.5]), [c(1.0), c(0.0), c(0.0)]);
        let mut d1 = DenseTensor::zeros(2);
        *d1.at_mut(&[0, 1]) = c(1.0);
        let s = PolyField::new([0.0; 3], alloc::vec![DenseTensor::zeros(1), d1]).unwrap();
        assert_eq!(s.eval(&[0.0, 0.7, 0.0]), [c(0.7), c(0.0), c(0.0)]);
    }

    #[test]
    fn uncurl_of_constant() {
        let z = [0.5, 0.0, -1.0];
        let t = PolyField::uniform(z, [c(1.0), c(0.0), c(0.0)]).uncurl().unwrap();
        // ½ e₁ × y = ½ (0, −y₃, y₂)
        assert_eq!(t.coefficient(1, [0, 0, 1]), c(-0.5));
        assert_eq!(t.coefficient(2, [0, 1, 0]), c(0.5));
        assert_eq!(t.components[0].len(), 0);
    }

    #[test]
    fn uncurl_rejects_divergence() {
        let id = DenseTensor::from_fn(2, |o| c(if o[0] == o[1] { 1.0 } else { 0.0 }));
        let s = PolyField::new([0.0; 3], alloc::vec![DenseTensor::zeros(1), id]).unwrap();
        assert!(matches!(s.uncurl(), Err(PolyError::NotDivergenceFree { .. })));
    }

    #[test]
    fn uniform_background_taylor() {
        let bg = BackgroundModel::uniform([0.0, 0.0, 1.0]);
        let f = taylor_background(&bg, &[1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(f.block(0).as_vector().unwrap(), [c(0.0), c(0.0), c(1.0)]);
        assert_eq!(f.block(1).max_abs(), 0.0);
        assert_eq!(f.block(2).max_abs(), 0.0);
    }

    #[test]
    fn dipole_singular() {
        let bg = BackgroundModel::Dipole { position: [0.0; 3], moment: [0.0, 0.0, 1.0] };
        assert!(matches!(
            taylor_background(&bg, &[0.0, 0.0, 1e-10], 1),
            Err(PolyError::SingularBackground { .. })
        ));
    }

    #[test]
    fn recenter_preserves_values() {
        let mut d1 = DenseTensor::zeros(2);
        *d1.at_mut(&[0, 1]) = c(2.0);
        *d1.at_mut(&[2, 2]) = c(-1.0);
        let mut d2 = DenseTensor::zeros(3);
        *d2.at_mut(&[1, 0, 0]) = c(0.3);
        let s = PolyField::new([0.1, 0.2, 0.3], alloc::vec![DenseTensor::vector([c(1.0), c(-2.0), c(0.5)]), d1, d2])
            .unwrap();
        let r = s.recenter([1.0, -1.0, 2.0]).unwrap();
        for x in [[0.0, 0.0, 0.0], [2.0, 1.0, -1.0]] {
            let (a, b) = (s.eval(&x), r.eval(&x));
            for i in 0..3 {
                assert!((a[i] - b[i]).norm() < 1e-12);
            }
        }
    }
}
