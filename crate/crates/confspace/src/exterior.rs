//! Exterior algebra over a direct sum of `m` copies of a `d`-dimensional
//! tangent space ("slots").
//!
//! A basis blade is a bitmask: bit `slot * d + a` stands for the frame vector
//! `e_a` of that slot, and the blade is the wedge of its vectors in ascending
//! bit order. Within a slot the canonical basis of `∧^k` is the set of masks of
//! popcount `k` in ascending numeric order.
//!
//! The inner product is the Gram-determinant one, so basis blades are
//! orthonormal. Equivalently, `∧^k` sits isometrically in `⊗^k` via
//! `ê_I ↦ (1/√k!) Σ_σ sgn σ e_{I_σ}`; [`antisymmetrize`] is the adjoint of
//! that embedding. Under this identification `v ∧ u` equals `√(n+1)` times the
//! antisymmetrization of `v ⊗ u`, and the interior product equals `√(n+1)`
//! times contraction in the first tensor factor. [`create`] and [`annihilate`]
//! are these two operators and are exact adjoints.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{Point, Space};
use crate::scalar::Scalar;

#[inline]
fn parity(n: u32) -> f64 {
    if n % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Sign of `e_A ∧ e_B` relative to `e_{A∪B}`; zero if they share a vector.
#[inline]
pub fn blade_sign(a: u64, b: u64) -> f64 {
    if a & b != 0 {
        return 0.0;
    }
    let mut swaps = 0;
    let mut rest = b;
    while rest != 0 {
        let j = rest.trailing_zeros();
        swaps += (a >> j).count_ones();
        rest &= rest - 1;
    }
    parity(swaps)
}

/// Per-slot degrees `(k_1, …, k_m)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockIndex {
    pub degrees: Vec<usize>,
}

impl BlockIndex {
    pub fn new(degrees: Vec<usize>, d: usize) -> Result<Self> {
        if degrees.iter().any(|&k| k == 0 || k > d) {
            return Err(Error::InvalidArgument(format!("block {degrees:?} invalid for d = {d}")));
        }
        Ok(Self { degrees })
    }

    pub fn degree(&self) -> usize {
        self.degrees.iter().sum()
    }

    /// All blocks with `m` slots, total degree `n`, slot degrees in `1..=d`.
    pub fn enumerate(n: usize, m: usize, d: usize) -> Vec<BlockIndex> {
        fn rec(left: usize, slots: usize, d: usize, cur: &mut Vec<usize>, out: &mut Vec<BlockIndex>) {
            if slots == 0 {
                if left == 0 {
                    out.push(BlockIndex { degrees: cur.clone() });
                }
                return;
            }
            for k in 1..=d.min(left) {
                cur.push(k);
                rec(left - k, slots - 1, d, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(n, m, d, &mut Vec::new(), &mut out);
        out
    }
}

/// Canonical basis of `∧^k(ℝ^d)` as masks.
pub fn canonical_basis(d: usize, k: usize) -> Vec<u64> {
    (0u64..(1u64 << d)).filter(|m| m.count_ones() as usize == k).collect()
}

/// Element of the exterior algebra over `slots` copies of `ℝ^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Multivector<T = f64> {
    dim: usize,
    slots: usize,
    terms: BTreeMap<u64, T>,
}

impl<T: Scalar> Multivector<T> {
    pub fn zero(dim: usize, slots: usize) -> Self {
        assert!(dim * slots <= 64, "too many slots for the blade encoding");
        Self { dim, slots, terms: BTreeMap::new() }
    }

    pub fn scalar(dim: usize, slots: usize, v: T) -> Self {
        let mut out = Self::zero(dim, slots);
        out.add_term(0, v);
        out
    }

    pub fn blade(dim: usize, slots: usize, key: u64, v: T) -> Self {
        let mut out = Self::zero(dim, slots);
        out.add_term(key, v);
        out
    }

    /// Vector `Σ_a v_a e_a` placed in `slot`.
    pub fn vector(dim: usize, slots: usize, slot: usize, v: &[T]) -> Self {
        let mut out = Self::zero(dim, slots);
        for (a, c) in v.iter().enumerate() {
            out.add_term(bit(dim, slot, a), *c);
        }
        out
    }

    /// Blade from per-slot masks.
    pub fn from_slot_masks(dim: usize, masks: &[u64], v: T) -> Self {
        Self::blade(dim, masks.len(), compose_key(dim, masks), v)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn terms(&self) -> impl Iterator<Item = (u64, T)> + '_ {
        self.terms.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coeff(&self, key: u64) -> T {
        self.terms.get(&key).copied().unwrap_or_else(T::zero)
    }

    pub fn add_term(&mut self, key: u64, v: T) {
        if v.is_zero() {
            return;
        }
        let e = self.terms.entry(key).or_insert_with(T::zero);
        *e += v;
    }

    pub fn slot_mask(&self, key: u64, slot: usize) -> u64 {
        slot_mask(self.dim, key, slot)
    }

    pub fn block_of(&self, key: u64) -> Vec<usize> {
        (0..self.slots).map(|s| self.slot_mask(key, s).count_ones() as usize).collect()
    }

    /// Retain only blades of total degree `n`.
    pub fn degree_part(&self, n: usize) -> Self {
        Self {
            dim: self.dim,
            slots: self.slots,
            terms: self.terms.iter().filter(|(k, _)| k.count_ones() as usize == n).map(|(k, v)| (*k, *v)).collect(),
        }
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim || self.slots != other.slots {
            return Err(Error::InvalidArgument(format!(
                "incompatible fibers ({}, {}) vs ({}, {})",
                self.dim, self.slots, other.dim, other.slots
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        out.add_assign(other);
        Ok(out)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        for (k, v) in &other.terms {
            self.add_term(*k, *v);
        }
    }

    pub(crate) fn add_scaled(&mut self, other: &Self, c: T) {
        for (k, v) in &other.terms {
            self.add_term(*k, *v * c);
        }
    }

    pub fn scale(&self, c: T) -> Self {
        let mut out = Self::zero(self.dim, self.slots);
        for (k, v) in &self.terms {
            out.add_term(*k, *v * c);
        }
        out
    }

    pub fn wedge(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(self.wedge_unchecked(other))
    }

    pub(crate) fn wedge_unchecked(&self, other: &Self) -> Self {
        let mut out = Self::zero(self.dim, self.slots);
        for (a, x) in &self.terms {
            for (b, y) in &other.terms {
                let s = blade_sign(*a, *b);
                if s != 0.0 {
                    out.add_term(a | b, (*x * *y).scale(s));
                }
            }
        }
        out
    }

    pub fn inner(&self, other: &Self) -> T {
        let mut acc = T::zero();
        for (k, v) in &self.terms {
            if let Some(w) = other.terms.get(k) {
                acc += *v * *w;
            }
        }
        acc
    }

    pub fn norm2(&self) -> T {
        self.inner(self)
    }

    /// `e_{slot,a} ∧ self`.
    pub fn ext(&self, slot: usize, a: usize) -> Self {
        let g = bit(self.dim, slot, a);
        let mut out = Self::zero(self.dim, self.slots);
        for (k, v) in &self.terms {
            if k & g == 0 {
                out.add_term(k | g, v.scale(parity((k & (g - 1)).count_ones())));
            }
        }
        out
    }

    /// Interior product with `e_{slot,a}`.
    pub fn interior(&self, slot: usize, a: usize) -> Self {
        let g = bit(self.dim, slot, a);
        let mut out = Self::zero(self.dim, self.slots);
        for (k, v) in &self.terms {
            if k & g != 0 {
                out.add_term(k & !g, v.scale(parity((k & (g - 1)).count_ones())));
            }
        }
        out
    }

    /// Embed into `slots + 1` slots with an empty slot at `pos`.
    pub fn insert_slot(&self, pos: usize) -> Self {
        let low = (1u64 << (pos * self.dim)) - 1;
        let mut out = Self::zero(self.dim, self.slots + 1);
        for (k, v) in &self.terms {
            out.add_term((k & low) | ((k & !low) << self.dim), *v);
        }
        out
    }

    /// Drop slot `pos`; every blade must be empty there.
    pub fn remove_slot(&self, pos: usize) -> Self {
        let low = (1u64 << (pos * self.dim)) - 1;
        let mut out = Self::zero(self.dim, self.slots - 1);
        for (k, v) in &self.terms {
            debug_assert_eq!(self.slot_mask(*k, pos), 0);
            out.add_term((k & low) | ((k >> self.dim) & !low), *v);
        }
        out
    }

    /// Reorder slots: new slot `j` is old slot `perm[j]`.
    pub fn permute_slots(&self, perm: &[usize]) -> Self {
        let d = self.dim;
        let mut inv = vec![0; perm.len()];
        for (j, &s) in perm.iter().enumerate() {
            inv[s] = j;
        }
        let mut out = Self::zero(d, self.slots);
        for (k, v) in &self.terms {
            let mut seq = Vec::with_capacity(k.count_ones() as usize);
            let mut rest = *k;
            while rest != 0 {
                let b = rest.trailing_zeros() as usize;
                seq.push(inv[b / d] * d + b % d);
                rest &= rest - 1;
            }
            let mut inversions = 0;
            for i in 0..seq.len() {
                for j in (i + 1)..seq.len() {
                    if seq[i] > seq[j] {
                        inversions += 1;
                    }
                }
            }
            let key = seq.iter().fold(0u64, |acc, b| acc | (1u64 << b));
            out.add_term(key, v.scale(parity(inversions)));
        }
        out
    }

    /// Act with `ops[k]` on the slot part of degree `k` of every blade.
    /// Missing entries act as zero.
    pub fn apply_slot(&self, slot: usize, ops: &[Option<&SlotOperator>]) -> Self {
        let mut out = Self::zero(self.dim, self.slots);
        let shift = slot * self.dim;
        for (k, v) in &self.terms {
            let s = self.slot_mask(*k, slot);
            let deg = s.count_ones() as usize;
            let Some(Some(op)) = ops.get(deg) else { continue };
            let rest = k & !(slot_full(self.dim) << shift);
            let col = op.index_of(s);
            for (row, t) in op.basis.iter().enumerate() {
                let c = op.matrix[(row, col)];
                if c != 0.0 {
                    out.add_term(rest | (t << shift), v.scale(c));
                }
            }
        }
        out
    }

    /// Induced action of a linear map of one slot's tangent space.
    pub fn map_slot(&self, slot: usize, l: &DMatrix<f64>) -> Self {
        let powers: Vec<SlotOperator> = (0..=self.dim).map(|k| SlotOperator::exterior_power(l, k)).collect();
        let refs: Vec<Option<&SlotOperator>> = powers.iter().map(Some).collect();
        self.apply_slot(slot, &refs)
    }

    pub fn map_coeffs<U: Scalar>(&self, f: impl Fn(T) -> U) -> Multivector<U> {
        let mut out = Multivector::<U>::zero(self.dim, self.slots);
        for (k, v) in &self.terms {
            out.add_term(*k, f(*v));
        }
        out
    }
}

impl Multivector<f64> {
    pub fn max_abs(&self) -> f64 {
        self.terms.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m: f64 = 0.0;
        for (k, v) in &self.terms {
            m = m.max((v - other.coeff(*k)).abs());
        }
        for (k, v) in &other.terms {
            if !self.terms.contains_key(k) {
                m = m.max(v.abs());
            }
        }
        m
    }
}

#[inline]
pub fn bit(dim: usize, slot: usize, a: usize) -> u64 {
    1u64 << (slot * dim + a)
}

#[inline]
fn slot_full(dim: usize) -> u64 {
    (1u64 << dim) - 1
}

#[inline]
pub fn slot_mask(dim: usize, key: u64, slot: usize) -> u64 {
    (key >> (slot * dim)) & slot_full(dim)
}

pub fn compose_key(dim: usize, masks: &[u64]) -> u64 {
    masks.iter().enumerate().fold(0, |acc, (s, m)| acc | (m << (s * dim)))
}

/// Linear operator on `∧^k` of one slot, in the canonical basis.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotOperator {
    pub dim: usize,
    pub degree: usize,
    pub basis: Vec<u64>,
    pub matrix: DMatrix<f64>,
}

impl SlotOperator {
    pub fn from_matrix(dim: usize, degree: usize, matrix: DMatrix<f64>) -> Result<Self> {
        let basis = canonical_basis(dim, degree);
        if matrix.nrows() != basis.len() || matrix.ncols() != basis.len() {
            return Err(Error::InvalidArgument("slot operator has wrong size".into()));
        }
        Ok(Self { dim, degree, basis, matrix })
    }

    pub fn zero(dim: usize, degree: usize) -> Self {
        let n = canonical_basis(dim, degree).len();
        Self::from_matrix(dim, degree, DMatrix::zeros(n, n)).unwrap()
    }

    pub fn identity(dim: usize, degree: usize) -> Self {
        let n = canonical_basis(dim, degree).len();
        Self::from_matrix(dim, degree, DMatrix::identity(n, n)).unwrap()
    }

    pub fn scaled_identity(dim: usize, degree: usize, c: f64) -> Self {
        let mut op = Self::identity(dim, degree);
        op.matrix *= c;
        op
    }

    pub fn index_of(&self, mask: u64) -> usize {
        self.basis.binary_search(&mask).expect("mask of the operator's degree")
    }

    /// Matrix of a single-slot linear map on multivectors of degree `k`.
    pub fn from_action(dim: usize, degree: usize, f: impl Fn(&Multivector) -> Multivector) -> Self {
        let basis = canonical_basis(dim, degree);
        let n = basis.len();
        let mut m = DMatrix::zeros(n, n);
        for (c, b) in basis.iter().enumerate() {
            let img = f(&Multivector::blade(dim, 1, *b, 1.0));
            for (key, v) in img.terms() {
                let r = basis.binary_search(&key).expect("degree-preserving action");
                m[(r, c)] = v;
            }
        }
        Self { dim, degree, basis, matrix: m }
    }

    /// `L^{∧k}`: minors of `L`.
    pub fn exterior_power(l: &DMatrix<f64>, k: usize) -> Self {
        let d = l.nrows();
        let basis = canonical_basis(d, k);
        let idx = |m: u64| (0..d).filter(|a| m >> a & 1 == 1).collect::<Vec<_>>();
        let m = DMatrix::from_fn(basis.len(), basis.len(), |r, c| {
            let (rows, cols) = (idx(basis[r]), idx(basis[c]));
            DMatrix::from_fn(k, k, |i, j| l[(rows[i], cols[j])]).determinant()
        });
        Self { dim: d, degree: k, basis, matrix: m }
    }

    /// Derivation `Σ_i 1 ∧ … ∧ A ∧ … ∧ 1` induced on `∧^k` by `A` on `T`.
    pub fn leibniz_lift(a: &DMatrix<f64>, k: usize) -> Self {
        let d = a.nrows();
        Self::from_action(d, k, |u| {
            let mut out = Multivector::zero(d, 1);
            for i in 0..d {
                for j in 0..d {
                    if a[(i, j)] != 0.0 {
                        out.add_scaled(&u.interior(0, j).ext(0, i), a[(i, j)]);
                    }
                }
            }
            out
        })
    }

    pub fn is_symmetric(&self) -> bool {
        self.matrix == self.matrix.transpose()
    }
}

/// A field of slot operators `x ↦ J_k(x)` for every degree `k`.
pub trait OperatorField: Send + Sync {
    fn at(&self, space: &Space, p: &Point, k: usize) -> SlotOperator;
}

/// `J_{n,m}(x̄)`: Leibniz sum of the per-slot fields on every block.
pub fn block_potential(
    space: &Space,
    field: &dyn OperatorField,
    points: &[Point],
    n: usize,
) -> BlockOperator {
    let d = space.dim();
    let m = points.len();
    let per_slot: Vec<Vec<SlotOperator>> =
        points.iter().map(|p| (0..=d).map(|k| if k == 0 { SlotOperator::zero(d, 0) } else { field.at(space, p, k) }).collect()).collect();
    BlockOperator::from_slot_operators(d, m, n, &per_slot)
}

/// Dense operator on `𝕋^(n)` over `m` slots (all blocks with `k_i ≥ 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockOperator {
    pub dim: usize,
    pub slots: usize,
    pub basis: Vec<u64>,
    pub matrix: DMatrix<f64>,
}

impl BlockOperator {
    pub fn basis(d: usize, m: usize, n: usize) -> Vec<u64> {
        let mut keys = Vec::new();
        for block in BlockIndex::enumerate(n, m, d) {
            let per: Vec<Vec<u64>> = block.degrees.iter().map(|&k| canonical_basis(d, k)).collect();
            let mut idx = vec![0usize; m];
            'outer: loop {
                let masks: Vec<u64> = (0..m).map(|s| per[s][idx[s]]).collect();
                keys.push(compose_key(d, &masks));
                for s in 0..m {
                    idx[s] += 1;
                    if idx[s] < per[s].len() {
                        continue 'outer;
                    }
                    idx[s] = 0;
                }
                break;
            }
        }
        keys.sort_unstable();
        keys
    }

    /// `per_slot[i][k]` acts on degree `k` of slot `i`.
    pub fn from_slot_operators(d: usize, m: usize, n: usize, per_slot: &[Vec<SlotOperator>]) -> Self {
        let basis = Self::basis(d, m, n);
        let mut mat = DMatrix::zeros(basis.len(), basis.len());
        for (c, key) in basis.iter().enumerate() {
            let u = Multivector::blade(d, m, *key, 1.0);
            let mut img = Multivector::zero(d, m);
            for (s, ops) in per_slot.iter().enumerate() {
                let refs: Vec<Option<&SlotOperator>> = ops.iter().enumerate().map(|(k, o)| if k == 0 { None } else { Some(o) }).collect();
                img.add_assign(&u.apply_slot(s, &refs));
            }
            for (k, v) in img.terms() {
                let r = basis.binary_search(&k).expect("block-preserving");
                mat[(r, c)] = v;
            }
        }
        Self { dim: d, slots: m, basis, matrix: mat }
    }

    pub fn apply(&self, u: &Multivector) -> Multivector {
        let mut out = Multivector::zero(self.dim, self.slots);
        for (key, v) in u.terms() {
            let Ok(c) = self.basis.binary_search(&key) else { continue };
            for r in 0..self.basis.len() {
                let a = self.matrix[(r, c)];
                if a != 0.0 {
                    out.add_term(self.basis[r], a * v);
                }
            }
        }
        out
    }

    pub fn to_vector(&self, u: &Multivector) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_iterator(self.basis.len(), self.basis.iter().map(|k| u.coeff(*k)))
    }

    pub fn from_vector(&self, v: &nalgebra::DVector<f64>) -> Multivector {
        let mut out = Multivector::zero(self.dim, self.slots);
        for (i, k) in self.basis.iter().enumerate() {
            out.add_term(*k, v[i]);
        }
        out
    }
}

/// `√(n+1) v ∧ u` in the tensor normalization, i.e. `v ∧ u` here.
pub fn create<T: Scalar>(v: &[T], slot: usize, u: &Multivector<T>) -> Multivector<T> {
    let mut out = Multivector::zero(u.dim(), u.slots());
    for (a, c) in v.iter().enumerate() {
        out.add_scaled(&u.ext(slot, a), *c);
    }
    out
}

/// `√(n+1)` times first-factor contraction, i.e. the interior product.
pub fn annihilate<T: Scalar>(v: &[T], slot: usize, u: &Multivector<T>) -> Multivector<T> {
    let mut out = Multivector::zero(u.dim(), u.slots());
    for (a, c) in v.iter().enumerate() {
        out.add_scaled(&u.interior(slot, a), *c);
    }
    out
}

/// Order-`r` tensor over the slot direct sum; an index is `slot * d + a`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor {
    pub dim: usize,
    pub slots: usize,
    pub terms: BTreeMap<Vec<usize>, f64>,
}

impl Tensor {
    pub fn new(dim: usize, slots: usize) -> Self {
        Self { dim, slots, terms: BTreeMap::new() }
    }

    pub fn add_term(&mut self, idx: Vec<usize>, v: f64) {
        if v != 0.0 {
            *self.terms.entry(idx).or_insert(0.0) += v;
        }
    }

    pub fn vector(dim: usize, slots: usize, slot: usize, v: &[f64]) -> Self {
        let mut t = Self::new(dim, slots);
        for (a, c) in v.iter().enumerate() {
            t.add_term(vec![slot * dim + a], *c);
        }
        t
    }

    pub fn tensor(&self, other: &Tensor) -> Tensor {
        let mut t = Tensor::new(self.dim, self.slots);
        for (i, x) in &self.terms {
            for (j, y) in &other.terms {
                let mut idx = i.clone();
                idx.extend_from_slice(j);
                t.add_term(idx, x * y);
            }
        }
        t
    }

    pub fn inner(&self, other: &Tensor) -> f64 {
        self.terms.iter().filter_map(|(k, v)| other.terms.get(k).map(|w| v * w)).sum()
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor { dim: self.dim, slots: self.slots, terms: self.terms.iter().map(|(k, v)| (k.clone(), v * c)).collect() }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Isometric embedding `∧^k → ⊗^k`.
pub fn embed_tensor(u: &Multivector) -> Tensor {
    let mut t = Tensor::new(u.dim(), u.slots());
    for (key, v) in u.terms() {
        let idx: Vec<usize> = (0..64).filter(|b| key >> b & 1 == 1).collect();
        let k = idx.len();
        let c = v / factorial(k).sqrt();
        for_each_permutation(k, |perm, sign| {
            t.add_term(perm.iter().map(|&i| idx[i]).collect(), c * sign);
        });
    }
    t
}

/// Orthogonal projection of `⊗^k` onto antisymmetric tensors, read in the
/// wedge basis (adjoint of [`embed_tensor`]).
pub fn antisymmetrize(t: &Tensor) -> Multivector {
    let mut out = Multivector::zero(t.dim, t.slots);
    for (idx, v) in &t.terms {
        let k = idx.len();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            continue;
        }
        let mut inversions = 0;
        for i in 0..k {
            for j in (i + 1)..k {
                if idx[i] > idx[j] {
                    inversions += 1;
                }
            }
        }
        let key = sorted.iter().fold(0u64, |acc, b| acc | (1u64 << b));
        out.add_term(key, v * parity(inversions) / factorial(k).sqrt());
    }
    out
}

/// Heap's algorithm; calls `f(perm, sign)` for every permutation of `0..k`.
pub fn for_each_permutation(k: usize, mut f: impl FnMut(&[usize], f64)) {
    let mut perm: Vec<usize> = (0..k).collect();
    let mut c = vec![0usize; k];
    let mut sign = 1.0;
    f(&perm, sign);
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            sign = -sign;
            f(&perm, sign);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// `Iso(u_1 ⊗ … ⊗ u_m)`: the factors placed in consecutive slots and wedged.
/// This is `√(n!/(k_1!⋯k_m!))` times the antisymmetrized tensor product.
pub fn iso_embed(factors: &[(Point, Multivector)]) -> Result<Multivector> {
    let m = factors.len();
    if m == 0 {
        return Err(Error::InvalidArgument("no factors".into()));
    }
    for i in 0..m {
        if factors[i].1.slots() != 1 {
            return Err(Error::InvalidArgument("factors must be single-slot".into()));
        }
        for j in 0..i {
            if factors[i].0 == factors[j].0 {
                return Err(Error::InvalidArgument("repeated base point".into()));
            }
        }
    }
    let d = factors[0].1.dim();
    let mut out = Multivector::scalar(d, m, 1.0);
    for (s, (_, u)) in factors.iter().enumerate() {
        let mut placed = u.clone();
        for _ in 0..s {
            placed = placed.insert_slot(0);
        }
        for _ in (s + 1)..m {
            placed = placed.insert_slot(placed.slots());
        }
        out = out.wedge_unchecked(&placed);
    }
    Ok(out)
}

/// `R_n(p) = Σ R_{ijkl} a_i* a_j a_l* a_k` on `∧^n(T_p)`.
///
/// With `R_{0101} = +K` this ordering yields the Ricci tensor on 1-forms;
/// the other ordering produces its negative.
pub fn curvature_operator(space: &Space, p: &Point, n: usize) -> SlotOperator {
    let d = space.dim();
    let mut r = vec![0.0; d * d * d * d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    r[((i * d + j) * d + k) * d + l] = space.curvature(p, i, j, k, l).unwrap();
                }
            }
        }
    }
    SlotOperator::from_action(d, n, |u| {
        let mut out = Multivector::zero(d, 1);
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        let c = r[((i * d + j) * d + k) * d + l];
                        if c != 0.0 {
                            out.add_scaled(&u.interior(0, k).ext(0, l).interior(0, j).ext(0, i), c);
                        }
                    }
                }
            }
        }
        out
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(d: usize, a: usize) -> Multivector {
        Multivector::blade(d, 1, 1 << a, 1.0)
    }

    #[test]
    fn wedge_examples() {
        let d = 3;
        assert!(e(d, 0).wedge(&e(d, 0)).unwrap().is_empty());
        let a = e(d, 0).wedge(&e(d, 1)).unwrap();
        let b = e(d, 1).wedge(&e(d, 0)).unwrap();
        assert_eq!(a, b.scale(-1.0));
        assert_eq!(a.inner(&a), 1.0);
        let two_slots = Multivector::<f64>::zero(d, 2);
        assert!(a.wedge(&two_slots).is_err());
    }

    #[test]
    fn gram_determinant_inner_product() {
        let d = 3;
        let u1 = Multivector::vector(d, 1, 0, &[1.0, 2.0, 0.5]);
        let u2 = Multivector::vector(d, 1, 0, &[-0.3, 1.0, 2.0]);
        let v1 = Multivector::vector(d, 1, 0, &[0.7, 0.0, 1.0]);
        let v2 = Multivector::vector(d, 1, 0, &[1.0, -1.0, 0.2]);
        let lhs = u1.wedge(&u2).unwrap().inner(&v1.wedge(&v2).unwrap());
        let rhs = u1.inner(&v1) * u2.inner(&v2) - u1.inner(&v2) * u2.inner(&v1);
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn antisymmetrizer_examples() {
        let d = 2;
        let e1 = Tensor::vector(d, 1, 0, &[1.0, 0.0]);
        let e2 = Tensor::vector(d, 1, 0, &[0.0, 1.0]);
        let t = e1.tensor(&e2);
        let w = antisymmetrize(&t);
        let e12 = e(d, 0).wedge(&e(d, 1)).unwrap();
        assert!((w.inner(&e12) - 0.5f64.sqrt()).abs() < 1e-15);
        // The projector applied to e1⊗e2 paired with e1⊗e2.
        assert!((embed_tensor(&w).inner(&t) - 0.5).abs() < 1e-15);
        assert!(antisymmetrize(&e1.tensor(&e1)).is_empty());
        assert_eq!(antisymmetrize(&e1), e(d, 0));
    }

    #[test]
    fn wedge_is_rescaled_antisymmetrized_tensor() {
        let d = 3;
        let v = [0.4, -1.0, 0.3];
        let u = e(d, 0).wedge(&e(d, 2)).unwrap().add(&e(d, 1).wedge(&e(d, 2)).unwrap().scale(0.5)).unwrap();
        let lhs = create(&v, 0, &u);
        let t = Tensor::vector(d, 1, 0, &v).tensor(&embed_tensor(&u));
        let rhs = antisymmetrize(&t).scale(3f64.sqrt());
        assert!(lhs.max_abs_diff(&rhs) < 1e-14);
    }

    #[test]
    fn annihilation_is_first_factor_contraction() {
        let d = 3;
        let v = [0.4, -1.0, 0.3];
        let w = e(d, 0).wedge(&e(d, 1)).unwrap().wedge(&e(d, 2)).unwrap();
        let lhs = annihilate(&v, 0, &w);
        let t = embed_tensor(&w);
        let mut contracted = Tensor::new(d, 1);
        for (idx, c) in &t.terms {
            contracted.add_term(idx[1..].to_vec(), c * v[idx[0]]);
        }
        let rhs = antisymmetrize(&contracted).scale(3f64.sqrt());
        assert!(lhs.max_abs_diff(&rhs) < 1e-14);
    }

    #[test]
    fn creation_annihilation_examples() {
        let d = 3;
        let one = Multivector::scalar(d, 1, 1.0);
        assert_eq!(create(&[1.0, 0.0, 0.0], 0, &one), e(d, 0));
        let e12 = e(d, 0).wedge(&e(d, 1)).unwrap();
        assert_eq!(annihilate(&[1.0, 0.0, 0.0], 0, &e12), e(d, 1));
        assert!(annihilate(&[0.0, 0.0, 1.0], 0, &e12).is_empty());
    }

    fn random_mv(d: usize, slots: usize, coeffs: &[f64]) -> Multivector {
        let mut u = Multivector::zero(d, slots);
        for (k, c) in coeffs.iter().enumerate() {
            u.add_term(k as u64 % (1 << (d * slots)), *c);
        }
        u
    }

    proptest! {
        #[test]
        fn creation_annihilation_adjoint(
            v in prop::collection::vec(-1.0f64..1.0, 3),
            cu in prop::collection::vec(-1.0f64..1.0, 64),
            cw in prop::collection::vec(-1.0f64..1.0, 64),
            slot in 0usize..2,
        ) {
            let u = random_mv(3, 2, &cu);
            let w = random_mv(3, 2, &cw);
            let lhs = create(&v, slot, &u).inner(&w);
            let rhs = u.inner(&annihilate(&v, slot, &w));
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn antisymmetrizer_is_a_projection(c in prop::collection::vec(-1.0f64..1.0, 27)) {
            let mut t = Tensor::new(3, 1);
            for (i, v) in c.iter().enumerate() {
                t.add_term(vec![i / 9, (i / 3) % 3, i % 3], *v);
            }
            let once = embed_tensor(&antisymmetrize(&t));
            let twice = embed_tensor(&antisymmetrize(&once));
            for (k, v) in &once.terms {
                prop_assert!((v - twice.terms.get(k).copied().unwrap_or(0.0)).abs() < 1e-12);
            }
            // Projection is self-adjoint and idempotent: <Pt, t> = <Pt, Pt>.
            prop_assert!((once.inner(&t) - once.inner(&once)).abs() < 1e-12);
        }

        #[test]
        fn wedge_graded_commutative_and_associative(
            a in prop::collection::vec(-1.0f64..1.0, 16),
            b in prop::collection::vec(-1.0f64..1.0, 16),
            c in prop::collection::vec(-1.0f64..1.0, 16),
            p in 0usize..3, q in 0usize..3,
        ) {
            let u = random_mv(2, 2, &a).degree_part(p);
            let v = random_mv(2, 2, &b).degree_part(q);
            let w = random_mv(2, 2, &c);
            let uv = u.wedge(&v).unwrap();
            let vu = v.wedge(&u).unwrap().scale(if (p * q) % 2 == 0 { 1.0 } else { -1.0 });
            prop_assert!(uv.max_abs_diff(&vu) < 1e-14);
            let l = uv.wedge(&w).unwrap();
            let r = u.wedge(&v.wedge(&w).unwrap()).unwrap();
            prop_assert!(l.max_abs_diff(&r) < 1e-14);
        }

        #[test]
        fn iso_is_isometric(
            raw in prop::collection::vec(-1.0f64..1.0, 9),
            k1 in 1usize..3, k2 in 1usize..3, k3 in 1usize..3,
        ) {
            // Random factors of degrees k1, k2, k3 in R^3.
            let d = 3;
            let factors: Vec<(Point, Multivector)> = [k1, k2, k3].iter().enumerate().map(|(s, &k)| {
                let mut u = Multivector::zero(d, 1);
                for (j, m) in canonical_basis(d, k).into_iter().enumerate() {
                    u.add_term(m, raw[s * 3 + j]);
                }
                (Point::new(&[s as f64]), u)
            }).collect();
            let img = iso_embed(&factors).unwrap();
            let prod: f64 = factors.iter().map(|(_, u)| u.norm2()).product();
            prop_assert!((img.norm2() - prod).abs() < 1e-12);
        }
    }

    #[test]
    fn iso_two_vectors_is_root_two_times_antisymmetrized_product() {
        let d = 2;
        let u = Multivector::vector(d, 1, 0, &[0.3, 0.8]);
        let v = Multivector::vector(d, 1, 0, &[-1.0, 0.2]);
        let img = iso_embed(&[(Point::new(&[0.0]), u.clone()), (Point::new(&[1.0]), v.clone())]).unwrap();
        let tu = Tensor::vector(d, 2, 0, &[0.3, 0.8]);
        let tv = Tensor::vector(d, 2, 1, &[-1.0, 0.2]);
        let rhs = antisymmetrize(&tu.tensor(&tv)).scale(2f64.sqrt());
        assert!(img.max_abs_diff(&rhs) < 1e-15);
        let single = iso_embed(&[(Point::new(&[0.0]), u.clone())]).unwrap();
        assert_eq!(single, u);
        assert!(iso_embed(&[(Point::new(&[0.0]), u.clone()), (Point::new(&[0.0]), v)]).is_err());
    }

    #[test]
    fn curvature_operator_examples() {
        let flat = Space::gaussian(3);
        let p = Point::new(&[0.1, 0.2, 0.3]);
        for n in 0..=3 {
            assert!(curvature_operator(&flat, &p, n).matrix.iter().all(|v| *v == 0.0));
        }
        let s = Space::sphere2();
        let q = Point::new(&[0.0, 0.6, 0.8]);
        assert_eq!(curvature_operator(&s, &q, 1).matrix, DMatrix::identity(2, 2));
        assert_eq!(curvature_operator(&s, &q, 2).matrix, DMatrix::zeros(1, 1));
    }

    #[test]
    fn curvature_operator_is_frame_independent() {
        // Rotating the frame by an orthogonal L conjugates the operator.
        let s = Space::sphere2();
        let q = Point::new(&[0.48, 0.6, 0.64]);
        let th: f64 = 0.7;
        let l = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        for n in 0..=2 {
            let r = curvature_operator(&s, &q, n);
            let lk = SlotOperator::exterior_power(&l, n);
            let conj = &lk.matrix.transpose() * &r.matrix * &lk.matrix;
            assert!((conj - &r.matrix).norm() < 1e-10);
        }
    }

    #[test]
    fn curvature_operator_on_three_sphere_model() {
        // p(d-p) on p-forms for constant curvature one; checked in d = 3
        // through the generic quadruple sum.
        let d = 3;
        let g = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        for n in 0..=3 {
            let op = SlotOperator::from_action(d, n, |u| {
                let mut out = Multivector::zero(d, 1);
                for i in 0..d {
                    for j in 0..d {
                        for k in 0..d {
                            for l in 0..d {
                                let c = g(i, k) * g(j, l) - g(i, l) * g(j, k);
                                if c != 0.0 {
                                    out.add_scaled(&u.interior(0, k).ext(0, l).interior(0, j).ext(0, i), c);
                                }
                            }
                        }
                    }
                }
                out
            });
            let expect = (n * (d - n)) as f64;
            assert!((op.matrix.clone() - DMatrix::identity(op.basis.len(), op.basis.len()) * expect).norm() < 1e-14);
        }
    }

    #[test]
    fn leibniz_lift_of_identity_counts_degree() {
        let id = DMatrix::identity(3, 3);
        for k in 0..=3 {
            let op = SlotOperator::leibniz_lift(&id, k);
            assert_eq!(op.matrix, DMatrix::identity(op.basis.len(), op.basis.len()) * k as f64);
        }
    }

    struct ScaledIdentity(f64);
    impl OperatorField for ScaledIdentity {
        fn at(&self, space: &Space, _p: &Point, k: usize) -> SlotOperator {
            SlotOperator::scaled_identity(space.dim(), k, self.0)
        }
    }

    struct Varying;
    impl OperatorField for Varying {
        fn at(&self, space: &Space, p: &Point, k: usize) -> SlotOperator {
            let d = space.dim();
            let a = DMatrix::from_fn(d, d, |i, j| (p.coords[0] * (i + 2 * j + 1) as f64).sin() + (p.coords[1] * (j + 2 * i + 1) as f64).sin());
            SlotOperator::leibniz_lift(&(&a + a.transpose()), k)
        }
    }

    #[test]
    fn block_potential_examples() {
        let s = Space::gaussian(2);
        let pts = vec![Point::new(&[0.1, 0.2]), Point::new(&[-0.4, 0.9])];
        for n in 2..=4 {
            let j = block_potential(&s, &ScaledIdentity(1.5), &pts, n);
            let dim = j.basis.len();
            assert_eq!(j.matrix, DMatrix::identity(dim, dim) * 3.0);
            let z = block_potential(&s, &ScaledIdentity(0.0), &pts, n);
            assert!(z.matrix.iter().all(|v| *v == 0.0));
            let v = block_potential(&s, &Varying, &pts, n);
            assert!((&v.matrix - v.matrix.transpose()).abs().max() < 1e-14);
        }
    }

    #[test]
    fn block_potential_relabeling_invariance() {
        let s = Space::gaussian(2);
        let pts = vec![Point::new(&[0.1, 0.2]), Point::new(&[-0.4, 0.9])];
        let swapped = vec![pts[1].clone(), pts[0].clone()];
        let j = block_potential(&s, &Varying, &pts, 3);
        let js = block_potential(&s, &Varying, &swapped, 3);
        for key in &j.basis {
            let u = Multivector::blade(2, 2, *key, 1.0);
            let direct = j.apply(&u);
            let via = js.apply(&u.permute_slots(&[1, 0])).permute_slots(&[1, 0]);
            assert!(direct.max_abs_diff(&via) < 1e-14);
        }
    }

    #[test]
    fn exterior_power_is_multiplicative() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 1.0, 0.3, 0.0, 2.0]);
        let b = DMatrix::from_row_slice(3, 3, &[0.2, 1.0, 1.0, 0.0, 1.0, -1.0, 1.0, 0.4, 0.0]);
        for k in 0..=3 {
            let l = SlotOperator::exterior_power(&(&a * &b), k).matrix;
            let r = SlotOperator::exterior_power(&a, k).matrix * SlotOperator::exterior_power(&b, k).matrix;
            assert!((l - r).norm() < 1e-12);
        }
    }

    #[test]
    fn slot_permutation_is_an_isometry_and_involution() {
        let u = random_mv(2, 3, &(0..64).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
        let p = u.permute_slots(&[2, 0, 1]);
        assert!((p.norm2() - u.norm2()).abs() < 1e-14);
        let inv = p.permute_slots(&[1, 2, 0]);
        assert!(inv.max_abs_diff(&u) < 1e-15);
    }

    #[test]
    fn blocks_enumeration() {
        assert_eq!(BlockIndex::enumerate(3, 2, 2).len(), 2);
        assert_eq!(BlockOperator::basis(2, 2, 2).len(), 4);
        assert!(BlockIndex::new(vec![0, 2], 2).is_err());
        assert_eq!(BlockIndex::new(vec![1, 2], 2).unwrap().degree(), 3);
    }
}
