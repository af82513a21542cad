//! Multi-indices, the alternating symbol, monomials and dense complex tensors
//! over the three spatial axes.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_complex::Complex64;

use crate::linalg::{orthogonality_defect, Mat3, Vec3};

pub type C64 = Complex64;

/// Largest tolerated entry of |QᵀQ − I| in [`DenseTensor::transform`].
pub const ORTHOGONALITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    InvalidAxis(u8),
    NonOrthogonal { defect: f64 },
    SlotOutOfRange { slot: usize, rank: usize },
    SameSlot(usize),
    RankMismatch { expected: usize, found: usize },
    DataLength { rank: usize, len: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::InvalidAxis(a) => write!(f, "axis label {a} outside 1..=3"),
            TensorError::NonOrthogonal { defect } => {
                write!(f, "matrix is not orthogonal (|QᵀQ − I| = {defect:.3e})")
            }
            TensorError::SlotOutOfRange { slot, rank } => {
                write!(f, "slot {slot} out of range for rank {rank}")
            }
            TensorError::SameSlot(s) => write!(f, "contraction slots coincide ({s})"),
            TensorError::RankMismatch { expected, found } => {
                write!(f, "rank mismatch: expected {expected}, found {found}")
            }
            TensorError::DataLength { rank, len } => {
                write!(f, "rank {rank} tensor needs 3^{rank} entries, got {len}")
            }
        }
    }
}

impl core::error::Error for TensorError {}

/// Ordered tuple of axis labels in {1,2,3}; the empty tuple is allowed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(Vec<u8>);

impl MultiIndex {
    pub fn new(entries: &[u8]) -> Result<Self, TensorError> {
        if let Some(&bad) = entries.iter().find(|&&a| !(1..=3).contains(&a)) {
            return Err(TensorError::InvalidAxis(bad));
        }
        Ok(MultiIndex(entries.to_vec()))
    }

    pub fn empty() -> Self {
        MultiIndex(Vec::new())
    }

    /// Build from zero-based axis offsets.
    pub fn from_offsets(offsets: &[usize]) -> Self {
        debug_assert!(offsets.iter().all(|&o| o < 3));
        MultiIndex(offsets.iter().map(|&o| o as u8 + 1).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entries(&self) -> &[u8] {
        &self.0
    }

    pub fn offsets(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|&a| (a - 1) as usize)
    }

    /// First label (the `j` of `J(p+1) = [j, J(p)]`).
    pub fn head(&self) -> Option<u8> {
        self.0.first().copied()
    }

    /// Labels after the first.
    pub fn tail(&self) -> MultiIndex {
        MultiIndex(self.0.iter().skip(1).copied().collect())
    }

    pub fn concat(&self, other: &MultiIndex) -> MultiIndex {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        MultiIndex(v)
    }

    /// Position in the lexicographic enumeration of tuples of this length.
    pub fn linear(&self) -> usize {
        self.offsets().fold(0, |acc, o| acc * 3 + o)
    }

    pub fn from_linear(mut index: usize, len: usize) -> Self {
        let mut v = vec![0u8; len];
        for slot in (0..len).rev() {
            v[slot] = (index % 3) as u8 + 1;
            index /= 3;
        }
        MultiIndex(v)
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (n, a) in self.0.iter().enumerate() {
            if n > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, "]")
    }
}

pub fn pow3(n: usize) -> usize {
    3usize.pow(n as u32)
}

/// All 3^p tuples of length `p` in lexicographic order.
pub fn enumerate_multiindices(p: usize) -> Vec<MultiIndex> {
    (0..pow3(p)).map(|n| MultiIndex::from_linear(n, p)).collect()
}

/// Alternating symbol on labels 1..=3. Labels outside that range give 0.
pub fn alternating(i: u8, j: u8, k: u8) -> i8 {
    if !(1..=3).contains(&i) || !(1..=3).contains(&j) || !(1..=3).contains(&k) {
        return 0;
    }
    epsilon(i as usize - 1, j as usize - 1, k as usize - 1)
}

/// Alternating symbol on zero-based offsets.
#[inline]
pub fn epsilon(i: usize, j: usize, k: usize) -> i8 {
    if i == j || j == k || i == k {
        0
    } else if (j + 3 - i) % 3 == 1 {
        1
    } else {
        -1
    }
}

/// Product of the coordinates of `xi` selected by `j`; 1 for the empty tuple.
pub fn monomial(xi: &Vec3, j: &MultiIndex) -> f64 {
    j.offsets().map(|o| xi[o]).product()
}

/// Monomial over zero-based offsets.
pub fn monomial_offsets(xi: &Vec3, offsets: &[usize]) -> f64 {
    offsets.iter().map(|&o| xi[o]).product()
}

/// Complex array of 3^rank entries in row-major lexicographic slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    rank: usize,
    data: Vec<C64>,
}

impl DenseTensor {
    pub fn zeros(rank: usize) -> Self {
        DenseTensor { rank, data: vec![C64::new(0.0, 0.0); pow3(rank)] }
    }

    pub fn scalar(value: C64) -> Self {
        DenseTensor { rank: 0, data: vec![value] }
    }

    pub fn from_vec(rank: usize, data: Vec<C64>) -> Result<Self, TensorError> {
        if data.len() != pow3(rank) {
            return Err(TensorError::DataLength { rank, len: data.len() });
        }
        Ok(DenseTensor { rank, data })
    }

    pub fn from_real(rank: usize, data: &[f64]) -> Result<Self, TensorError> {
        Self::from_vec(rank, data.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    /// Fill every slot from a function of the zero-based offsets.
    pub fn from_fn(rank: usize, mut f: impl FnMut(&[usize]) -> C64) -> Self {
        let mut offsets = vec![0usize; rank];
        let mut data = Vec::with_capacity(pow3(rank));
        for n in 0..pow3(rank) {
            decode(n, &mut offsets);
            data.push(f(&offsets));
        }
        DenseTensor { rank, data }
    }

    pub fn vector(v: [C64; 3]) -> Self {
        DenseTensor { rank: 1, data: v.to_vec() }
    }

    pub fn matrix(m: [[C64; 3]; 3]) -> Self {
        DenseTensor { rank: 2, data: m.iter().flatten().copied().collect() }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn get(&self, index: &MultiIndex) -> C64 {
        assert_eq!(index.len(), self.rank, "multi-index length must equal rank");
        self.data[index.linear()]
    }

    pub fn set(&mut self, index: &MultiIndex, value: C64) {
        assert_eq!(index.len(), self.rank, "multi-index length must equal rank");
        self.data[index.linear()] = value;
    }

    /// Entry at zero-based offsets.
    pub fn at(&self, offsets: &[usize]) -> C64 {
        debug_assert_eq!(offsets.len(), self.rank);
        self.data[offsets.iter().fold(0, |acc, &o| acc * 3 + o)]
    }

    pub fn at_mut(&mut self, offsets: &[usize]) -> &mut C64 {
        debug_assert_eq!(offsets.len(), self.rank);
        let n = offsets.iter().fold(0, |acc, &o| acc * 3 + o);
        &mut self.data[n]
    }

    pub fn as_matrix(&self) -> Option<[[C64; 3]; 3]> {
        (self.rank == 2).then(|| {
            let d = &self.data;
            [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]]
        })
    }

    pub fn as_vector(&self) -> Option<[C64; 3]> {
        (self.rank == 1).then(|| [self.data[0], self.data[1], self.data[2]])
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|z| z.norm_sqr()).sum::<f64>())
    }

    pub fn scaled(&self, s: C64) -> DenseTensor {
        DenseTensor { rank: self.rank, data: self.data.iter().map(|&z| z * s).collect() }
    }

    pub fn conj(&self) -> DenseTensor {
        DenseTensor { rank: self.rank, data: self.data.iter().map(|z| z.conj()).collect() }
    }

    pub fn add(&self, other: &DenseTensor) -> Result<DenseTensor, TensorError> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor, TensorError> {
        self.zip(other, |a, b| a - b)
    }

    pub fn add_assign_scaled(&mut self, other: &DenseTensor, s: C64) -> Result<(), TensorError> {
        if self.rank != other.rank {
            return Err(TensorError::RankMismatch { expected: self.rank, found: other.rank });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
        Ok(())
    }

    fn zip(
        &self,
        other: &DenseTensor,
        f: impl Fn(C64, C64) -> C64,
    ) -> Result<DenseTensor, TensorError> {
        if self.rank != other.rank {
            return Err(TensorError::RankMismatch { expected: self.rank, found: other.rank });
        }
        Ok(DenseTensor {
            rank: self.rank,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Largest entry of |self − other| divided by the largest entry of |other|
    /// (absolute when `other` vanishes).
    pub fn relative_deviation(&self, other: &DenseTensor) -> Result<f64, TensorError> {
        let diff = self.sub(other)?.max_abs();
        let scale = other.max_abs();
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }

    /// Apply `q` to every slot: T'_I = Π_r Q_{i_r i'_r} T_{I'}.
    pub fn transform(&self, q: &Mat3) -> Result<DenseTensor, TensorError> {
        let defect = orthogonality_defect(q);
        if !(defect <= ORTHOGONALITY_TOL) {
            return Err(TensorError::NonOrthogonal { defect });
        }
        let mut current = self.data.clone();
        let mut next = vec![C64::new(0.0, 0.0); current.len()];
        for slot in 0..self.rank {
            let stride = pow3(self.rank - 1 - slot);
            let block = 3 * stride;
            for base in (0..current.len()).step_by(block) {
                for inner in 0..stride {
                    let src = [
                        current[base + inner],
                        current[base + stride + inner],
                        current[base + 2 * stride + inner],
                    ];
                    for (a, row) in q.iter().enumerate() {
                        next[base + a * stride + inner] =
                            src[0] * row[0] + src[1] * row[1] + src[2] * row[2];
                    }
                }
            }
            core::mem::swap(&mut current, &mut next);
        }
        Ok(DenseTensor { rank: self.rank, data: current })
    }

    /// Rank-reducing contraction out_r = ½ Σ ε_{r,i,k} T[..i@a..k@b..]; the new
    /// slot takes the position of min(a, b) and slot max(a, b) is removed.
    pub fn contract_skew(&self, slot_a: usize, slot_b: usize) -> Result<DenseTensor, TensorError> {
        self.check_pair(slot_a, slot_b)?;
        let (lo, hi) = (slot_a.min(slot_b), slot_a.max(slot_b));
        let out_rank = self.rank - 1;
        let mut full = vec![0usize; self.rank];
        Ok(DenseTensor::from_fn(out_rank, |out| {
            let mut acc = C64::new(0.0, 0.0);
            let r = out[lo];
            for i in 0..3 {
                for k in 0..3 {
                    let e = epsilon(r, i, k);
                    if e == 0 {
                        continue;
                    }
                    fill_with_pair(&mut full, out, lo, hi, (slot_a, i), (slot_b, k));
                    acc += self.at(&full) * f64::from(e);
                }
            }
            acc * 0.5
        }))
    }

    /// Inverse of [`contract_skew`](Self::contract_skew) on skew parts:
    /// T[..i@a..k@b..] = Σ_r ε_{r,i,k} v[..r@min(a,b)..].
    pub fn expand_skew(&self, slot_a: usize, slot_b: usize) -> Result<DenseTensor, TensorError> {
        let out_rank = self.rank + 1;
        if slot_a >= out_rank || slot_b >= out_rank {
            return Err(TensorError::SlotOutOfRange {
                slot: slot_a.max(slot_b),
                rank: out_rank,
            });
        }
        if slot_a == slot_b {
            return Err(TensorError::SameSlot(slot_a));
        }
        let (lo, hi) = (slot_a.min(slot_b), slot_a.max(slot_b));
        let mut reduced = vec![0usize; self.rank];
        Ok(DenseTensor::from_fn(out_rank, |full| {
            let (i, k) = (full[slot_a], full[slot_b]);
            let mut n = 0;
            for (s, &o) in full.iter().enumerate() {
                if s != hi {
                    reduced[n] = o;
                    n += 1;
                }
            }
            let mut acc = C64::new(0.0, 0.0);
            for r in 0..3 {
                let e = epsilon(r, i, k);
                if e != 0 {
                    reduced[lo] = r;
                    acc += self.at(&reduced) * f64::from(e);
                }
            }
            acc
        }))
    }

    /// Contract the trailing `n` slots of `self` against the leading `n` slots of `other`.
    pub fn contract(&self, other: &DenseTensor, n: usize) -> Result<DenseTensor, TensorError> {
        if n > self.rank || n > other.rank {
            return Err(TensorError::RankMismatch { expected: n, found: self.rank.min(other.rank) });
        }
        let inner = pow3(n);
        let left = pow3(self.rank - n);
        let right = pow3(other.rank - n);
        let mut data = vec![C64::new(0.0, 0.0); left * right];
        for a in 0..left {
            for k in 0..inner {
                let x = self.data[a * inner + k];
                if x == C64::new(0.0, 0.0) {
                    continue;
                }
                let row = &other.data[k * right..(k + 1) * right];
                for (dst, y) in data[a * right..(a + 1) * right].iter_mut().zip(row) {
                    *dst += x * y;
                }
            }
        }
        Ok(DenseTensor { rank: self.rank + other.rank - 2 * n, data })
    }

    /// Average over all permutations of the slots in `first..first + count`.
    pub fn symmetrize(&self, first: usize, count: usize) -> Result<DenseTensor, TensorError> {
        if first + count > self.rank {
            return Err(TensorError::SlotOutOfRange { slot: first + count, rank: self.rank });
        }
        if count < 2 {
            return Ok(self.clone());
        }
        let mut sorted = vec![0usize; self.rank];
        let mut sums = vec![C64::new(0.0, 0.0); self.data.len()];
        let mut counts = vec![0u32; self.data.len()];
        let mut offsets = vec![0usize; self.rank];
        for n in 0..self.data.len() {
            decode(n, &mut offsets);
            sorted.copy_from_slice(&offsets);
            sorted[first..first + count].sort_unstable();
            let key = sorted.iter().fold(0, |acc, &o| acc * 3 + o);
            sums[key] += self.data[n];
            counts[key] += 1;
        }
        Ok(DenseTensor::from_fn(self.rank, |offs| {
            let mut s = offs.to_vec();
            s[first..first + count].sort_unstable();
            let key = s.iter().fold(0, |acc, &o| acc * 3 + o);
            sums[key] / f64::from(counts[key])
        }))
    }

    /// Largest deviation from symmetry under swapping any two slots in the range.
    pub fn symmetry_defect(&self, first: usize, count: usize) -> f64 {
        let mut worst: f64 = 0.0;
        let mut offsets = vec![0usize; self.rank];
        for n in 0..self.data.len() {
            decode(n, &mut offsets);
            for a in first..first + count {
                for b in a + 1..first + count {
                    let mut swapped = offsets.clone();
                    swapped.swap(a, b);
                    worst = worst.max((self.data[n] - self.at(&swapped)).norm());
                }
            }
        }
        worst
    }

    /// Sum over a pair of slots set equal: Σ_i T[..i@a..i@b..].
    pub fn trace(&self, slot_a: usize, slot_b: usize) -> Result<DenseTensor, TensorError> {
        self.check_pair(slot_a, slot_b)?;
        let (lo, hi) = (slot_a.min(slot_b), slot_a.max(slot_b));
        let mut full = vec![0usize; self.rank];
        Ok(DenseTensor::from_fn(self.rank - 2, |out| {
            let mut acc = C64::new(0.0, 0.0);
            for i in 0..3 {
                let mut n = 0;
                for (s, slot) in full.iter_mut().enumerate() {
                    if s == lo || s == hi {
                        *slot = i;
                    } else {
                        *slot = out[n];
                        n += 1;
                    }
                }
                acc += self.at(&full);
            }
            acc
        }))
    }

    fn check_pair(&self, a: usize, b: usize) -> Result<(), TensorError> {
        for s in [a, b] {
            if s >= self.rank {
                return Err(TensorError::SlotOutOfRange { slot: s, rank: self.rank });
            }
        }
        if a == b {
            return Err(TensorError::SameSlot(a));
        }
        Ok(())
    }
}

fn decode(mut n: usize, offsets: &mut [usize]) {
    for slot in (0..offsets.len()).rev() {
        offsets[slot] = n % 3;
        n /= 3;
    }
}

/// Build a full offset list from a reduced one (slot `hi` removed, `lo` present)
/// with explicit values at `a` and `b`.
fn fill_with_pair(
    full: &mut [usize],
    reduced: &[usize],
    lo: usize,
    hi: usize,
    (sa, va): (usize, usize),
    (sb, vb): (usize, usize),
) {
    let mut n = 0;
    for (s, slot) in full.iter_mut().enumerate() {
        if s == hi {
            continue;
        }
        if s == lo {
            n += 1;
            continue;
        }
        *slot = reduced[n];
        n += 1;
    }
    full[sa] = va;
    full[sb] = vb;
}

#[cfg(feature = "serde")]
mod serde_impl {
    use super::*;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        rank: usize,
        data: Vec<[f64; 2]>,
    }

    impl Serialize for DenseTensor {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            Repr { rank: self.rank, data: self.data.iter().map(|z| [z.re, z.im]).collect() }
                .serialize(s)
        }
    }

    impl<'de> Deserialize<'de> for DenseTensor {
        fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
            let repr = Repr::deserialize(d)?;
            let data = repr.data.iter().map(|p| C64::new(p[0], p[1])).collect();
            DenseTensor::from_vec(repr.rank, data).map_err(D::Error::custom)
        }
    }

    impl Serialize for MultiIndex {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            self.0.serialize(s)
        }
    }

    impl<'de> Deserialize<'de> for MultiIndex {
        fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
            let v = Vec::<u8>::deserialize(d)?;
            MultiIndex::new(&v).map_err(D::Error::custom)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{mat_mul, rotation_axis_angle, transpose};

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn alternating_values() {
        assert_eq!(alternating(1, 2, 3), 1);
        assert_eq!(alternating(2, 3, 1), 1);
        assert_eq!(alternating(2, 1, 3), -1);
        assert_eq!(alternating(1, 1, 2), 0);
    }

    #[test]
    fn alternating_is_totally_antisymmetric() {
        for i in 1..=3 {
            for j in 1..=3 {
                for k in 1..=3 {
                    let e = alternating(i, j, k);
                    assert_eq!(alternating(j, i, k), -e);
                    assert_eq!(alternating(i, k, j), -e);
                    assert_eq!(alternating(k, j, i), -e);
                }
            }
        }
    }

    #[test]
    fn epsilon_product_identity() {
        // ε_{ℓrs} ε_{ikr} summed over r equals δ_{ℓk}δ_{si} − δ_{ℓi}δ_{sk}
        let d = |a: usize, b: usize| i32::from(a == b);
        for l in 0..3 {
            for s in 0..3 {
                for i in 0..3 {
                    for k in 0..3 {
                        let lhs: i32 = (0..3)
                            .map(|r| i32::from(epsilon(l, r, s)) * i32::from(epsilon(i, k, r)))
                            .sum();
                        let alt: i32 = (0..3)
                            .map(|r| -i32::from(epsilon(r, l, s)) * i32::from(epsilon(r, i, k)))
                            .sum();
                        let rhs = d(l, k) * d(s, i) - d(l, i) * d(s, k);
                        assert_eq!(lhs, rhs);
                        assert_eq!(alt, rhs);
                    }
                }
            }
        }
    }

    #[test]
    fn monomial_examples() {
        assert_eq!(monomial(&[2.0, 5.0, 7.0], &MultiIndex::empty()), 1.0);
        assert_eq!(monomial(&[1.0, 2.0, 3.0], &MultiIndex::new(&[1, 3]).unwrap()), 3.0);
        assert_eq!(monomial(&[0.5, 1.0, 1.0], &MultiIndex::new(&[1, 1]).unwrap()), 0.25);
    }

    #[test]
    fn multiindex_validation_and_enumeration() {
        assert_eq!(MultiIndex::new(&[1, 4]), Err(TensorError::InvalidAxis(4)));
        assert_eq!(enumerate_multiindices(0), vec![MultiIndex::empty()]);
        let one: Vec<_> = enumerate_multiindices(1).iter().map(|m| m.entries().to_vec()).collect();
        assert_eq!(one, vec![vec![1], vec![2], vec![3]]);
        let two = enumerate_multiindices(2);
        assert_eq!(two.len(), 9);
        assert_eq!(two[0].entries(), &[1, 1]);
        assert_eq!(two[8].entries(), &[3, 3]);
        for (n, m) in enumerate_multiindices(3).iter().enumerate() {
            assert_eq!(m.linear(), n);
        }
    }

    #[test]
    fn transform_rotates_basis_vector() {
        let q = rotation_axis_angle(&[0.0, 0.0, 1.0], core::f64::consts::FRAC_PI_2);
        let e1 = DenseTensor::vector([c(1.0), c(0.0), c(0.0)]);
        let out = e1.transform(&q).unwrap().as_vector().unwrap();
        assert!((out[0]).norm() < 1e-15 && (out[1] - c(1.0)).norm() < 1e-15);
    }

    #[test]
    fn transform_rejects_non_orthogonal() {
        let q = [[1.0, 0.0, 0.0], [0.0, 1.0, 1e-9], [0.0, 0.0, 1.0]];
        assert!(matches!(
            DenseTensor::zeros(2).transform(&q),
            Err(TensorError::NonOrthogonal { .. })
        ));
    }

    #[test]
    fn transform_accepts_reflection() {
        let q = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let t = DenseTensor::from_fn(3, |o| c((o[0] + 2 * o[1] + 5 * o[2]) as f64));
        let out = t.transform(&q).unwrap();
        for o0 in 0..3 {
            for o1 in 0..3 {
                for o2 in 0..3 {
                    let sign = [o0, o1, o2].iter().filter(|&&x| x == 0).count();
                    let expect = t.at(&[o0, o1, o2]) * if sign % 2 == 0 { 1.0 } else { -1.0 };
                    assert_eq!(out.at(&[o0, o1, o2]), expect);
                }
            }
        }
    }

    #[test]
    fn transform_matches_matrix_conjugation() {
        let q = rotation_axis_angle(&[0.3, -1.0, 0.4], 0.77);
        let m = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 10.0]];
        let t = DenseTensor::from_fn(2, |o| c(m[o[0]][o[1]]));
        let expect = mat_mul(&mat_mul(&q, &m), &transpose(&q));
        let out = t.transform(&q).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((out.at(&[i, j]).re - expect[i][j]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn contract_skew_examples() {
        let mut t = DenseTensor::zeros(2);
        *t.at_mut(&[0, 1]) = c(1.0);
        *t.at_mut(&[1, 0]) = c(-1.0);
        let v = t.contract_skew(0, 1).unwrap().as_vector().unwrap();
        assert_eq!(v, [c(0.0), c(0.0), c(1.0)]);
        let sym = DenseTensor::from_fn(2, |o| c((o[0] * o[1] + o[0] + o[1]) as f64));
        assert_eq!(sym.contract_skew(0, 1).unwrap().max_abs(), 0.0);
        assert!(matches!(t.contract_skew(0, 2), Err(TensorError::SlotOutOfRange { .. })));
        assert!(matches!(t.contract_skew(1, 1), Err(TensorError::SameSlot(1))));
    }

    #[test]
    fn contract_skew_round_trip_brute_force() {
        let t = DenseTensor::from_fn(2, |o| C64::new((o[0] * 3 + o[1]) as f64, (o[1] as f64) - 0.5));
        let v = t.contract_skew(0, 1).unwrap();
        let back = v.expand_skew(0, 1).unwrap();
        // brute-force skew part over all 3² slots
        for i in 0..3 {
            for k in 0..3 {
                let skew = (t.at(&[i, k]) - t.at(&[k, i])) * 0.5;
                assert!((back.at(&[i, k]) - skew).norm() < 1e-14);
            }
        }
        let again = back.contract_skew(0, 1).unwrap();
        assert!(again.sub(&v).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn contract_skew_places_output_at_lower_slot() {
        // rank 4, contract slots 3 and 1; remaining slots (0, r, 2)
        let t = DenseTensor::from_fn(4, |o| c((o[0] * 27 + o[1] * 9 + o[2] * 3 + o[3]) as f64 * 0.1 + (o[1] * o[3]) as f64));
        let out = t.contract_skew(3, 1).unwrap();
        for a in 0..3 {
            for r in 0..3 {
                for b in 0..3 {
                    let mut expect = C64::new(0.0, 0.0);
                    for i in 0..3 {
                        for k in 0..3 {
                            expect += t.at(&[a, k, b, i]) * f64::from(epsilon(r, i, k)) * 0.5;
                        }
                    }
                    assert!((out.at(&[a, r, b]) - expect).norm() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn contract_and_trace() {
        let a = DenseTensor::from_fn(2, |o| c((o[0] + 1) as f64 * (o[1] + 2) as f64));
        let v = DenseTensor::vector([c(1.0), c(-1.0), c(2.0)]);
        let av = a.contract(&v, 1).unwrap().as_vector().unwrap();
        for i in 0..3 {
            let expect: C64 = (0..3).map(|j| a.at(&[i, j]) * v.at(&[j])).sum();
            assert_eq!(av[i], expect);
        }
        let tr = a.trace(0, 1).unwrap();
        assert_eq!(tr.rank(), 0);
        assert_eq!(tr.data()[0], c(2.0 + 6.0 + 12.0));
    }

    #[test]
    fn symmetrize_is_projection() {
        let t = DenseTensor::from_fn(3, |o| c((o[0] * 9 + o[1] * 3 + o[2]) as f64));
        let s = t.symmetrize(1, 2).unwrap();
        assert!(s.symmetry_defect(1, 2) < 1e-15);
        assert!(s.symmetrize(1, 2).unwrap().sub(&s).unwrap().max_abs() < 1e-15);
        assert!(t.symmetry_defect(1, 2) > 0.5);
    }
}
