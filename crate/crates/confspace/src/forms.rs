//! Cylinder functions, symmetric form fields and cylinder forms.
//!
//! A cylinder form is a finite sum of product terms `(m, F, ω)` whose value on
//! a configuration `γ` is, on every `m`-subset `x̄ ⊂ γ`,
//! `W_m(γ)(x̄) = √(m!) F(γ∖x̄) ω(x̄)`. Values are collected in a [`FormValue`],
//! keyed by the sorted point indices of the subset.
//!
//! Everything is generic over [`Scalar`], so the same evaluator produces exact
//! derivatives when point coordinates are seeded with hyper-dual numbers.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exterior::{for_each_permutation, Multivector};
use crate::geometry::{Coords, Manifold, Point, Space, Window};
use crate::pointprocess::{m_subsets, Configuration};
use crate::scalar::{Scalar, Smooth};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

/// Polynomial in ambient coordinates (or in the statistics `s_i` for outer functions).
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn constant(c: f64) -> Self {
        Self { terms: vec![Monomial { coef: c, powers: vec![] }] }
    }

    pub fn monomial(coef: f64, powers: &[u32]) -> Self {
        Self { terms: vec![Monomial { coef, powers: powers.to_vec() }] }
    }

    pub fn plus(mut self, coef: f64, powers: &[u32]) -> Self {
        self.terms.push(Monomial { coef, powers: powers.to_vec() });
        self
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|t| t.powers.iter().sum::<u32>()).max().unwrap_or(0)
    }

    fn power(x: &[f64], powers: &[u32], skip: &[usize]) -> f64 {
        let mut v = 1.0;
        for (i, &p) in powers.iter().enumerate() {
            let mut p = p as i32;
            let mut c = 1.0;
            for &s in skip {
                if s == i {
                    c *= p as f64;
                    p -= 1;
                }
            }
            if p < 0 {
                return 0.0;
            }
            v *= c * x[i].powi(p);
        }
        v
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.coef * Self::power(x, &t.powers, &[])).sum()
    }

    pub fn jet(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let n = x.len();
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n * n];
        let mut v = 0.0;
        for t in &self.terms {
            v += t.coef * Self::power(x, &t.powers, &[]);
            for i in 0..n.min(t.powers.len()) {
                g[i] += t.coef * Self::power(x, &t.powers, &[i]);
                for j in 0..n.min(t.powers.len()) {
                    h[i * n + j] += t.coef * Self::power(x, &t.powers, &[i, j]);
                }
            }
        }
        (v, g, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Envelope {
    None,
    /// `exp(-|x - c|² / (2 w²))`.
    Gaussian { center: Vec<f64>, width: f64 },
    /// `exp(-1 / (1 - |x - c|²/r²))` inside the ball, zero outside.
    Bump { center: Vec<f64>, radius: f64 },
}

/// `φ(x) = P(x) · E(x)` in ambient coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunction {
    pub poly: Polynomial,
    pub envelope: Envelope,
}

impl TestFunction {
    pub fn gaussian(center: &[f64], width: f64, amplitude: f64) -> Self {
        Self { poly: Polynomial::constant(amplitude), envelope: Envelope::Gaussian { center: center.to_vec(), width } }
    }

    pub fn gaussian_poly(center: &[f64], width: f64, poly: Polynomial) -> Self {
        Self { poly, envelope: Envelope::Gaussian { center: center.to_vec(), width } }
    }

    pub fn bump(center: &[f64], radius: f64, amplitude: f64) -> Self {
        Self { poly: Polynomial::constant(amplitude), envelope: Envelope::Bump { center: center.to_vec(), radius } }
    }

    pub fn polynomial(poly: Polynomial) -> Self {
        Self { poly, envelope: Envelope::None }
    }

    /// The coordinate function `x_i` in ambient dimension `dim`.
    pub fn coordinate(i: usize, dim: usize) -> Self {
        let mut p = vec![0; dim];
        p[i] = 1;
        Self::polynomial(Polynomial::monomial(1.0, &p))
    }

    pub fn constant(c: f64) -> Self {
        Self::polynomial(Polynomial::constant(c))
    }

    /// Bounding box of the support, `None` when unbounded.
    pub fn support_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.envelope {
            Envelope::Bump { center, radius } => {
                Some((center.iter().map(|c| c - radius).collect(), center.iter().map(|c| c + radius).collect()))
            }
            _ if self.poly.terms.iter().all(|t| t.coef == 0.0) => Some((vec![], vec![])),
            _ => None,
        }
    }

    fn envelope_jet(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let n = x.len();
        match &self.envelope {
            Envelope::None => (1.0, vec![0.0; n], vec![0.0; n * n]),
            Envelope::Gaussian { center, width } => {
                let w2 = width * width;
                let r: Vec<f64> = (0..n).map(|i| x[i] - center[i]).collect();
                let e = (-r.iter().map(|v| v * v).sum::<f64>() / (2.0 * w2)).exp();
                let g = r.iter().map(|v| -v / w2 * e).collect();
                let mut h = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        h[i * n + j] = (r[i] * r[j] / (w2 * w2) - if i == j { 1.0 / w2 } else { 0.0 }) * e;
                    }
                }
                (e, g, h)
            }
            Envelope::Bump { center, radius } => {
                let r2 = radius * radius;
                let r: Vec<f64> = (0..n).map(|i| x[i] - center[i]).collect();
                let u = 1.0 - r.iter().map(|v| v * v).sum::<f64>() / r2;
                if u <= 0.0 {
                    return (0.0, vec![0.0; n], vec![0.0; n * n]);
                }
                let e = (-1.0 / u).exp();
                let du: Vec<f64> = r.iter().map(|v| -2.0 * v / r2).collect();
                let g = du.iter().map(|d| e / (u * u) * d).collect();
                let a = e / u.powi(4) - 2.0 * e / u.powi(3);
                let mut h = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        h[i * n + j] = a * du[i] * du[j] + if i == j { -2.0 / r2 * e / (u * u) } else { 0.0 };
                    }
                }
                (e, g, h)
            }
        }
    }

    /// Gradient in the orthonormal frame of `space` at `x`.
    pub fn grad(&self, space: &Space, x: &[f64]) -> Coords<f64> {
        let (_, g, _) = self.jet(x);
        space.to_frame(x, &g)
    }

    /// Covariant Hessian in the frame (row-major `d × d`).
    pub fn hessian(&self, space: &Space, x: &[f64]) -> Vec<f64> {
        let (_, g, h) = self.jet(x);
        match space.manifold() {
            Manifold::Euclidean(_) => h,
            Manifold::Sphere2 => {
                let fr = space.frame(x);
                let radial: f64 = (0..3).map(|i| x[i] * g[i]).sum();
                let mut out = vec![0.0; 4];
                for a in 0..2 {
                    for b in 0..2 {
                        let mut s = 0.0;
                        for i in 0..3 {
                            for j in 0..3 {
                                s += fr[a][i] * h[i * 3 + j] * fr[b][j];
                            }
                        }
                        out[a * 2 + b] = s - if a == b { radial } else { 0.0 };
                    }
                }
                out
            }
        }
    }

    pub fn laplacian(&self, space: &Space, x: &[f64]) -> f64 {
        let d = space.dim();
        let h = self.hessian(space, x);
        (0..d).map(|a| h[a * d + a]).sum()
    }
}

impl Smooth for TestFunction {
    fn value(&self, x: &[f64]) -> f64 {
        let e = match &self.envelope {
            Envelope::None => 1.0,
            _ => self.envelope_jet(x).0,
        };
        if e == 0.0 {
            0.0
        } else {
            self.poly.value(x) * e
        }
    }

    fn jet(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let n = x.len();
        let (p, gp, hp) = self.poly.jet(x);
        let (e, ge, he) = self.envelope_jet(x);
        let g = (0..n).map(|i| gp[i] * e + p * ge[i]).collect();
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                h[i * n + j] = hp[i * n + j] * e + gp[i] * ge[j] + ge[i] * gp[j] + p * he[i * n + j];
            }
        }
        (p * e, g, h)
    }
}

/// Smooth outer function with a closed-form jet.
pub trait OuterFn: Smooth + Send + Sync + Debug {}
impl<T: Smooth + Send + Sync + Debug> OuterFn for T {}

/// Outer function `g` of a cylinder function.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Outer {
    /// `P(s) · exp(tilt · s)`.
    ExpPoly { poly: Polynomial, tilt: Vec<f64> },
    /// `amplitude · cos(freq · s + phase)`.
    Cosine { freq: Vec<f64>, phase: f64, amplitude: f64 },
    #[serde(skip)]
    Custom(Arc<dyn OuterFn>),
}

impl Smooth for Outer {
    fn value(&self, s: &[f64]) -> f64 {
        match self {
            Outer::ExpPoly { poly, tilt } => {
                let t: f64 = tilt.iter().zip(s).map(|(a, b)| a * b).sum();
                poly.value(s) * t.exp()
            }
            Outer::Cosine { freq, phase, amplitude } => {
                amplitude * (freq.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() + phase).cos()
            }
            Outer::Custom(f) => f.value(s),
        }
    }

    fn jet(&self, s: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let n = s.len();
        match self {
            Outer::ExpPoly { poly, tilt } => {
                let t = |i: usize| tilt.get(i).copied().unwrap_or(0.0);
                let e = (0..n).map(|i| t(i) * s[i]).sum::<f64>().exp();
                let (p, gp, hp) = poly.jet(s);
                let g = (0..n).map(|i| (gp[i] + t(i) * p) * e).collect();
                let mut h = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        h[i * n + j] = (hp[i * n + j] + t(i) * gp[j] + t(j) * gp[i] + t(i) * t(j) * p) * e;
                    }
                }
                (p * e, g, h)
            }
            Outer::Cosine { freq, phase, amplitude } => {
                let arg = freq.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() + phase;
                let (sn, cs) = arg.sin_cos();
                let g = freq.iter().map(|w| -amplitude * sn * w).collect();
                let mut h = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        h[i * n + j] = -amplitude * cs * freq[i] * freq[j];
                    }
                }
                (amplitude * cs, g, h)
            }
            Outer::Custom(f) => f.jet(s),
        }
    }
}

/// `F(γ) = g(⟨φ_1, γ_Λ⟩, …, ⟨φ_N, γ_Λ⟩)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylinderFunction {
    pub outer: Outer,
    pub inner: Vec<TestFunction>,
    pub window: Window,
}

/// Smallest box containing every support, or `All`.
pub(crate) fn union_window(funcs: &[&TestFunction]) -> Window {
    let mut lo: Vec<f64> = Vec::new();
    let mut hi: Vec<f64> = Vec::new();
    for f in funcs {
        match f.support_box() {
            None => return Window::All,
            Some((l, h)) if l.is_empty() => {
                let _ = h;
            }
            Some((l, h)) => {
                if lo.is_empty() {
                    lo = l;
                    hi = h;
                } else {
                    for i in 0..lo.len() {
                        lo[i] = lo[i].min(l[i]);
                        hi[i] = hi[i].max(h[i]);
                    }
                }
            }
        }
    }
    if lo.is_empty() {
        Window::All
    } else {
        Window::Box { lo, hi }
    }
}

impl CylinderFunction {
    pub fn new(outer: Outer, inner: Vec<TestFunction>) -> Self {
        let window = union_window(&inner.iter().collect::<Vec<_>>());
        Self { outer, inner, window }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(Outer::ExpPoly { poly: Polynomial::constant(c), tilt: vec![] }, vec![])
    }

    /// `⟨φ, γ⟩`.
    pub fn linear(phi: TestFunction) -> Self {
        Self::new(Outer::ExpPoly { poly: Polynomial::monomial(1.0, &[1]), tilt: vec![0.0] }, vec![phi])
    }

    /// `exp(c ⟨φ, γ⟩)`.
    pub fn exponential(phi: TestFunction, c: f64) -> Self {
        Self::new(Outer::ExpPoly { poly: Polynomial::constant(1.0), tilt: vec![c] }, vec![phi])
    }

    pub fn is_constant(&self) -> bool {
        self.inner.is_empty()
    }

    /// Statistics `s_i = Σ_{x ∈ Λ} φ_i(x)`.
    pub fn sums<T: Scalar>(&self, pts: &[Coords<T>]) -> Vec<T> {
        let mut s = vec![T::zero(); self.inner.len()];
        for x in pts {
            let xr: Vec<f64> = x.iter().map(|c| c.re()).collect();
            if !self.window.contains(&xr) {
                continue;
            }
            for (i, phi) in self.inner.iter().enumerate() {
                s[i] += T::lift(phi, x);
            }
        }
        s
    }

    /// `F` evaluated on the configuration with the listed points removed.
    pub fn eval_removed<T: Scalar>(&self, sums: &[T], pts: &[Coords<T>], removed: &[usize]) -> T {
        if self.inner.is_empty() {
            return T::lift(&self.outer, &[]);
        }
        let mut s = sums.to_vec();
        for &r in removed {
            let xr: Vec<f64> = pts[r].iter().map(|c| c.re()).collect();
            if !self.window.contains(&xr) {
                continue;
            }
            for (i, phi) in self.inner.iter().enumerate() {
                s[i] -= T::lift(phi, &pts[r]);
            }
        }
        T::lift(&self.outer, &s)
    }

    pub fn eval_coords<T: Scalar>(&self, pts: &[Coords<T>]) -> T {
        let s = self.sums(pts);
        T::lift(&self.outer, &s)
    }

    pub fn eval(&self, gamma: &Configuration) -> f64 {
        self.eval_points(&gamma.points)
    }

    pub fn eval_points(&self, pts: &[Point]) -> f64 {
        let s: Vec<f64> = self
            .inner
            .iter()
            .map(|phi| pts.iter().filter(|p| self.window.contains(&p.coords)).map(|p| phi.value(&p.coords)).sum())
            .collect();
        self.outer.value(&s)
    }
}

pub fn eval_function(f: &CylinderFunction, gamma: &Configuration) -> f64 {
    f.eval(gamma)
}

/// `∇^Γ F(γ)_x` for every point, in frame components.
pub fn grad_gamma(space: &Space, f: &CylinderFunction, pts: &[Point]) -> Vec<Coords<f64>> {
    let d = space.dim();
    let s: Vec<f64> = f
        .inner
        .iter()
        .map(|phi| pts.iter().filter(|p| f.window.contains(&p.coords)).map(|p| phi.value(&p.coords)).sum())
        .collect();
    let (_, g, _) = f.outer.jet(&s);
    pts.iter()
        .map(|p| {
            let mut out: Coords<f64> = (0..d).map(|_| 0.0).collect();
            if f.window.contains(&p.coords) {
                for (i, phi) in f.inner.iter().enumerate() {
                    let gp = phi.grad(space, &p.coords);
                    for a in 0..d {
                        out[a] += g[i] * gp[a];
                    }
                }
            }
            out
        })
        .collect()
}

/// Shape of a single-slot factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SlotShape {
    /// The frame blade `ê_mask`.
    Frame { mask: u64 },
    /// The 1-form dual to the tangential part of `x ↦ A x + b` (A row-major).
    Linear { a: Vec<f64>, b: Vec<f64> },
    /// The oriented volume form.
    Volume,
}

/// `coeff(x) · shape(x)` on one slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotFactor {
    pub shape: SlotShape,
    pub coeff: TestFunction,
}

impl SlotFactor {
    pub fn frame(mask: u64, coeff: TestFunction) -> Self {
        Self { shape: SlotShape::Frame { mask }, coeff }
    }

    pub fn linear(a: Vec<f64>, b: Vec<f64>, coeff: TestFunction) -> Self {
        Self { shape: SlotShape::Linear { a, b }, coeff }
    }

    pub fn volume(coeff: TestFunction) -> Self {
        Self { shape: SlotShape::Volume, coeff }
    }

    pub fn degree(&self, d: usize) -> usize {
        match &self.shape {
            SlotShape::Frame { mask } => mask.count_ones() as usize,
            SlotShape::Linear { .. } => 1,
            SlotShape::Volume => d,
        }
    }

    /// Value at `x` as a multivector with `slots` slots, placed in `slot`.
    pub fn eval<T: Scalar>(&self, space: &Space, x: &[T], slots: usize, slot: usize) -> Multivector<T> {
        let d = space.dim();
        let c = T::lift(&self.coeff, x);
        match &self.shape {
            SlotShape::Frame { mask } => Multivector::blade(d, slots, mask << (slot * d), c),
            SlotShape::Volume => Multivector::blade(d, slots, ((1u64 << d) - 1) << (slot * d), c),
            SlotShape::Linear { a, b } => {
                let n = space.ambient_dim();
                let v: Vec<T> = (0..n)
                    .map(|i| {
                        let mut s = T::cst(b[i]);
                        for j in 0..n {
                            if a[i * n + j] != 0.0 {
                                s += x[j].scale(a[i * n + j]);
                            }
                        }
                        s * c
                    })
                    .collect();
                let comps = space.to_frame(x, &v);
                Multivector::vector(d, slots, slot, &comps)
            }
        }
    }

    /// Divergence of the dual vector field (1-forms only).
    pub fn divergence(&self, space: &Space, x: &[f64]) -> Result<f64> {
        let (phi, g, _) = self.coeff.jet(x);
        match (&self.shape, space.manifold()) {
            (SlotShape::Frame { mask }, Manifold::Euclidean(_)) if mask.count_ones() == 1 => {
                Ok(g[mask.trailing_zeros() as usize])
            }
            (SlotShape::Volume, Manifold::Euclidean(1)) => Ok(g[0]),
            (SlotShape::Linear { a, b }, m) => {
                let n = space.ambient_dim();
                let y: Vec<f64> = (0..n).map(|i| b[i] + (0..n).map(|j| a[i * n + j] * x[j]).sum::<f64>()).collect();
                let gy: f64 = (0..n).map(|i| g[i] * y[i]).sum();
                let tr: f64 = (0..n).map(|i| a[i * n + i]).sum();
                Ok(match m {
                    Manifold::Euclidean(_) => gy + phi * tr,
                    Manifold::Sphere2 => {
                        let py: f64 = (0..3).map(|i| x[i] * y[i]).sum();
                        let pg: f64 = (0..3).map(|i| x[i] * g[i]).sum();
                        let pap: f64 = (0..3).map(|i| (0..3).map(|j| x[i] * a[i * 3 + j] * x[j]).sum::<f64>()).sum();
                        // tangential gradient · tangential field + φ (tr_T A − 2 p·y)
                        (gy - pg * py) + phi * (tr - pap - 2.0 * py)
                    }
                })
            }
            _ => Err(Error::Unsupported("divergence of this slot shape".into())),
        }
    }
}

/// `weight · factor_1(x_1) ∧ … ∧ factor_m(x_m)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductTerm {
    pub weight: f64,
    pub factors: Vec<SlotFactor>,
}

/// An `m`-point form field given by product terms, not necessarily symmetric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFormField {
    pub m: usize,
    pub terms: Vec<ProductTerm>,
}

impl RawFormField {
    pub fn eval<T: Scalar>(&self, space: &Space, pts: &[&[T]]) -> Multivector<T> {
        let d = space.dim();
        let mut out = Multivector::zero(d, self.m);
        for term in &self.terms {
            let mut acc = Multivector::scalar(d, self.m, T::cst(term.weight));
            for (s, f) in term.factors.iter().enumerate() {
                acc = acc.wedge_unchecked(&f.eval(space, pts[s], self.m, s));
                if acc.is_empty() {
                    break;
                }
            }
            out.add_assign(&acc);
        }
        out
    }
}

/// `(1/m!) Σ_ν ω(x̄∘ν)` read back in the original slot order.
pub fn symmetrize_values<T: Scalar>(
    m: usize,
    pts: &[&[T]],
    eval: impl Fn(&[&[T]]) -> Multivector<T>,
) -> Multivector<T> {
    let mut out: Option<Multivector<T>> = None;
    let mut count = 0usize;
    for_each_permutation(m, |perm, _| {
        let permuted: Vec<&[T]> = perm.iter().map(|&i| pts[i]).collect();
        let v = eval(&permuted);
        // Slot j of `v` sits at point perm[j]; move it back to slot perm[j].
        let mut inv = vec![0; m];
        for (j, &p) in perm.iter().enumerate() {
            inv[p] = j;
        }
        let back = v.permute_slots(&inv);
        match &mut out {
            None => out = Some(back),
            Some(o) => o.add_assign(&back),
        }
        count += 1;
    });
    out.expect("at least one permutation").scale(T::cst(1.0 / count as f64))
}

/// A symmetric `m`-point form field of degree `n` with all slot degrees ≥ 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFormField", into = "RawFormField")]
pub struct SymmetricFormField {
    raw: RawFormField,
    n: usize,
    window: Window,
}

impl From<SymmetricFormField> for RawFormField {
    fn from(s: SymmetricFormField) -> Self {
        s.raw
    }
}

impl TryFrom<RawFormField> for SymmetricFormField {
    type Error = Error;
    fn try_from(raw: RawFormField) -> Result<Self> {
        symmetrize(raw)
    }
}

/// Validate a raw field and wrap it with symmetrized evaluation.
pub fn symmetrize(raw: RawFormField) -> Result<SymmetricFormField> {
    if raw.terms.is_empty() {
        return Err(Error::InvalidArgument("empty form field".into()));
    }
    let mut n = None;
    for t in &raw.terms {
        if t.factors.len() != raw.m {
            return Err(Error::InvalidArgument("factor count differs from m".into()));
        }
        // Volume counts as degree d; the smallest dimension it can mean is 1.
        let deg: usize = t.factors.iter().map(|f| match f.shape {
            SlotShape::Volume => usize::MAX / 8,
            _ => f.degree(0),
        }).sum();
        if t.factors.iter().any(|f| matches!(&f.shape, SlotShape::Frame { mask } if *mask == 0)) {
            return Err(Error::InvalidArgument("slot of degree zero".into()));
        }
        if !t.factors.iter().any(|f| matches!(f.shape, SlotShape::Volume)) {
            match n {
                None => n = Some(deg),
                Some(k) if k != deg => return Err(Error::InvalidArgument("mixed degrees".into())),
                _ => {}
            }
        }
    }
    let coeffs: Vec<&TestFunction> = raw.terms.iter().flat_map(|t| t.factors.iter().map(|f| &f.coeff)).collect();
    let window = union_window(&coeffs);
    Ok(SymmetricFormField { n: n.unwrap_or(usize::MAX), raw, window })
}

impl SymmetricFormField {
    /// The constant scalar field on zero points (for 0-forms).
    pub fn unit() -> Self {
        Self { raw: RawFormField { m: 0, terms: vec![ProductTerm { weight: 1.0, factors: vec![] }] }, n: 0, window: Window::All }
    }

    pub fn m(&self) -> usize {
        self.raw.m
    }

    /// Degree, resolving volume factors against the space dimension.
    pub fn degree(&self, space: &Space) -> usize {
        let d = space.dim();
        self.raw.terms[0].factors.iter().map(|f| f.degree(d)).sum()
    }

    pub fn raw(&self) -> &RawFormField {
        &self.raw
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn eval<T: Scalar>(&self, space: &Space, pts: &[&[T]]) -> Multivector<T> {
        if self.raw.m <= 1 {
            return self.raw.eval(space, pts);
        }
        symmetrize_values(self.raw.m, pts, |p| self.raw.eval(space, p))
    }

    pub fn eval_points(&self, space: &Space, pts: &[Point]) -> Multivector {
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.coords.as_slice()).collect();
        self.eval(space, &refs)
    }
}

/// A product term `(m, F, ω)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormTerm {
    pub f: CylinderFunction,
    pub omega: SymmetricFormField,
}

impl FormTerm {
    pub fn m(&self) -> usize {
        self.omega.m()
    }
}

/// Finite sum of product terms of a common degree `n`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylinderForm {
    pub n: usize,
    pub terms: Vec<FormTerm>,
}

impl CylinderForm {
    pub fn new(space: &Space, terms: Vec<FormTerm>) -> Result<Self> {
        let n = terms.first().map(|t| t.omega.degree(space)).ok_or_else(|| Error::InvalidArgument("no terms".into()))?;
        if terms.iter().any(|t| t.omega.degree(space) != n) {
            return Err(Error::InvalidArgument("terms of different degree".into()));
        }
        for t in &terms {
            if t.omega.raw().terms.iter().any(|p| p.factors.iter().any(|f| f.degree(space.dim()) > space.dim())) {
                return Err(Error::InvalidArgument("slot degree exceeds dimension".into()));
            }
        }
        Ok(Self { n, terms })
    }

    /// The 0-form given by a cylinder function.
    pub fn function(f: CylinderFunction) -> Self {
        Self { n: 0, terms: vec![FormTerm { f, omega: SymmetricFormField::unit() }] }
    }

    pub fn single(space: &Space, f: CylinderFunction, omega: SymmetricFormField) -> Result<Self> {
        Self::new(space, vec![FormTerm { f, omega }])
    }

    pub fn plus(mut self, other: &CylinderForm) -> Result<Self> {
        if other.n != self.n {
            return Err(Error::InvalidArgument("degree mismatch".into()));
        }
        self.terms.extend(other.terms.iter().cloned());
        Ok(self)
    }
}

/// Value of an `n`-form at a configuration: one multivector per subset of
/// point indices (slots in ascending index order).
#[derive(Clone, Debug, PartialEq)]
pub struct FormValue<T = f64> {
    pub dim: usize,
    pub degree: usize,
    pub comps: BTreeMap<Vec<usize>, Multivector<T>>,
}

impl<T: Scalar> FormValue<T> {
    pub fn zero(dim: usize, degree: usize) -> Self {
        Self { dim, degree, comps: BTreeMap::new() }
    }

    pub fn add_comp(&mut self, subset: Vec<usize>, v: &Multivector<T>) {
        if v.is_empty() {
            return;
        }
        match self.comps.get_mut(&subset) {
            Some(c) => c.add_assign(v),
            None => {
                self.comps.insert(subset, v.clone());
            }
        }
    }

    pub fn add_scaled(&mut self, other: &FormValue<T>, c: T) {
        for (k, v) in &other.comps {
            self.add_comp(k.clone(), &v.scale(c));
        }
    }

    pub fn scale(&self, c: T) -> Self {
        let mut out = Self::zero(self.dim, self.degree);
        out.add_scaled(self, c);
        out
    }

    pub fn inner(&self, other: &FormValue<T>) -> T {
        let mut acc = T::zero();
        for (k, v) in &self.comps {
            if let Some(w) = other.comps.get(k) {
                acc += v.inner(w);
            }
        }
        acc
    }

    pub fn map_coeffs<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> FormValue<U> {
        FormValue {
            dim: self.dim,
            degree: self.degree,
            comps: self.comps.iter().map(|(k, v)| (k.clone(), v.map_coeffs(f))).collect(),
        }
    }

    pub fn comp(&self, subset: &[usize]) -> Option<&Multivector<T>> {
        self.comps.get(subset)
    }
}

impl FormValue<f64> {
    pub fn max_abs(&self) -> f64 {
        self.comps.values().fold(0.0, |m, v| m.max(v.max_abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m: f64 = 0.0;
        for (k, v) in &self.comps {
            m = m.max(match other.comps.get(k) {
                Some(w) => v.max_abs_diff(w),
                None => v.max_abs(),
            });
        }
        for (k, v) in &other.comps {
            if !self.comps.contains_key(k) {
                m = m.max(v.max_abs());
            }
        }
        m
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }
}

fn factorial(m: usize) -> f64 {
    (1..=m).map(|i| i as f64).product()
}

/// `W(γ)` at points given by (possibly seeded) coordinates.
pub fn eval_form_coords<T: Scalar>(space: &Space, w: &CylinderForm, pts: &[Coords<T>]) -> FormValue<T> {
    let d = space.dim();
    let mut out = FormValue::zero(d, w.n);
    let real: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|c| c.re()).collect()).collect();
    for term in &w.terms {
        let m = term.m();
        let sums = term.f.sums(pts);
        let root = factorial(m).sqrt();
        if m == 0 {
            let v = term.f.eval_removed(&sums, pts, &[]);
            out.add_comp(vec![], &Multivector::scalar(d, 0, v));
            continue;
        }
        let inside: Vec<usize> = (0..pts.len()).filter(|&i| term.omega.window().contains(&real[i])).collect();
        for sub in m_subsets(inside.len(), m) {
            let idx: Vec<usize> = sub.iter().map(|&i| inside[i]).collect();
            let refs: Vec<&[T]> = idx.iter().map(|&i| pts[i].as_slice()).collect();
            let om = term.omega.eval(space, &refs);
            if om.is_empty() {
                continue;
            }
            let fv = term.f.eval_removed(&sums, pts, &idx);
            out.add_comp(idx, &om.scale(fv.scale(root)));
        }
    }
    out
}

pub fn coords_of(pts: &[Point]) -> Vec<Coords<f64>> {
    pts.iter().map(|p| p.coords.clone()).collect()
}

pub fn eval_form(space: &Space, w: &CylinderForm, gamma: &Configuration) -> FormValue {
    eval_form_coords(space, w, &coords_of(&gamma.points))
}

pub fn eval_form_points(space: &Space, w: &CylinderForm, pts: &[Point]) -> FormValue {
    eval_form_coords(space, w, &coords_of(pts))
}

pub fn inner_forms(space: &Space, w: &CylinderForm, v: &CylinderForm, gamma: &Configuration) -> Result<f64> {
    if w.n != v.n {
        return Err(Error::InvalidArgument("forms of different order".into()));
    }
    Ok(eval_form(space, w, gamma).inner(&eval_form(space, v, gamma)))
}

/// `I^n W` as a list of `m`-components `F ⊗ ω`.
#[derive(Clone, Debug)]
pub struct TensorRep {
    pub n: usize,
    pub parts: Vec<(CylinderFunction, SymmetricFormField)>,
}

impl TensorRep {
    /// `Σ F(γ) ω(x̄)` over the parts with `m = |x̄|`.
    pub fn eval(&self, space: &Space, gamma: &[Point], xbar: &[Point]) -> Multivector {
        let d = space.dim();
        let mut out = Multivector::zero(d, xbar.len());
        for (f, om) in &self.parts {
            if om.m() == xbar.len() {
                out.add_assign(&om.eval_points(space, xbar).scale(f.eval_points(gamma)));
            }
        }
        out
    }
}

pub fn i_n_apply(w: &CylinderForm) -> TensorRep {
    TensorRep { n: w.n, parts: w.terms.iter().map(|t| (t.f.clone(), t.omega.clone())).collect() }
}

pub fn i_n_inverse(rep: &TensorRep) -> CylinderForm {
    CylinderForm { n: rep.n, terms: rep.parts.iter().map(|(f, om)| FormTerm { f: f.clone(), omega: om.clone() }).collect() }
}

/// `(m!)^{-1/2} W_m(γ ∪ x̄)(x̄)`, computed from the configuration evaluator.
pub fn i_n_component(space: &Space, w: &CylinderForm, gamma: &[Point], xbar: &[Point]) -> Result<Multivector> {
    for (i, x) in xbar.iter().enumerate() {
        if gamma.contains(x) || xbar[..i].contains(x) {
            return Err(Error::UndefinedPoint);
        }
    }
    let mut pts = gamma.to_vec();
    pts.extend_from_slice(xbar);
    let idx: Vec<usize> = (gamma.len()..pts.len()).collect();
    let val = eval_form_points(space, w, &pts);
    let m = xbar.len();
    Ok(val.comp(&idx).cloned().unwrap_or_else(|| Multivector::zero(space.dim(), m)).scale(1.0 / factorial(m).sqrt()))
}

/// Vector field `V(γ)_x`; stored as a 1-form with `m = 1` terms, i.e.
/// `V(γ)_x = Σ G(γ∖{x}) v(x)`.
#[derive(Clone, Debug)]
pub struct LiftedVector {
    pub form: CylinderForm,
}

impl LiftedVector {
    pub fn new(form: CylinderForm) -> Result<Self> {
        if form.n != 1 || form.terms.iter().any(|t| t.m() != 1) {
            return Err(Error::InvalidArgument("lifted vector needs a 1-form with m = 1 terms".into()));
        }
        Ok(Self { form })
    }

    /// `V(γ)_x` per point, in frame components.
    pub fn eval(&self, space: &Space, pts: &[Point]) -> Vec<Coords<f64>> {
        let val = eval_form_points(space, &self.form, pts);
        let d = space.dim();
        (0..pts.len())
            .map(|i| {
                let c = val.comp(&[i]);
                (0..d).map(|a| c.map_or(0.0, |mv| mv.coeff(1 << a))).collect()
            })
            .collect()
    }
}

/// `⟨∇^Γ F, V⟩_γ`.
pub fn directional(space: &Space, f: &CylinderFunction, v: &LiftedVector, pts: &[Point]) -> f64 {
    let g = grad_gamma(space, f, pts);
    let vv = v.eval(space, pts);
    g.iter().zip(&vv).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()).sum()
}

/// `div^Γ V(γ) = Σ_x G(γ∖{x}) div v(x)`.
pub fn div_gamma(space: &Space, v: &LiftedVector, pts: &[Point]) -> Result<f64> {
    let mut acc = 0.0;
    let coords = coords_of(pts);
    for term in &v.form.terms {
        let sums = term.f.sums(&coords);
        for (i, p) in pts.iter().enumerate() {
            if !term.omega.window().contains(&p.coords) {
                continue;
            }
            let g = term.f.eval_removed(&sums, &coords, &[i]);
            let mut div = 0.0;
            for pt in &term.omega.raw().terms {
                div += pt.weight * pt.factors[0].divergence(space, &p.coords)?;
            }
            acc += g * div;
        }
    }
    Ok(acc)
}

/// `⟨B_πσ(γ), V(γ)⟩ = Σ_x ⟨β(x), V(γ)_x⟩`.
pub fn beta_pairing(space: &Space, v: &LiftedVector, pts: &[Point]) -> f64 {
    v.eval(space, pts)
        .iter()
        .zip(pts)
        .map(|(vx, p)| space.beta(p).components.iter().zip(vx).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::HyperDual;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_fns() -> Vec<TestFunction> {
        vec![
            TestFunction::gaussian(&[0.3, -0.2], 0.8, 1.3),
            TestFunction::gaussian_poly(&[-0.4, 0.5], 0.7, Polynomial::monomial(1.0, &[1, 0]).plus(0.5, &[0, 2])),
            TestFunction::bump(&[0.5, 0.5], 1.2, 2.0),
            TestFunction::polynomial(Polynomial::monomial(0.5, &[2, 0]).plus(0.5, &[0, 2])),
        ]
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for f in sample_fns() {
            for _ in 0..50 {
                let x = [rng.gen_range(-1.0..1.5), rng.gen_range(-1.0..1.5)];
                let (_, g, hs) = f.jet(&x);
                for a in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[a] += h;
                    xm[a] -= h;
                    let fd = (f.value(&xp) - f.value(&xm)) / (2.0 * h);
                    assert!((fd - g[a]).abs() < 1e-6, "{f:?} {x:?}");
                    let (_, gp, _) = f.jet(&xp);
                    let (_, gm, _) = f.jet(&xm);
                    for b in 0..2 {
                        assert!(((gp[b] - gm[b]) / (2.0 * h) - hs[a * 2 + b]).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn sphere_laplacian_of_linear_function() {
        // Restrictions of linear functions are eigenfunctions with eigenvalue -2.
        let s = Space::sphere2();
        let f = TestFunction::polynomial(Polynomial::monomial(0.3, &[1, 0, 0]).plus(-0.7, &[0, 0, 1]));
        let p = s.project(&[0.3, -0.5, 0.4]);
        assert!((f.laplacian(&s, &p.coords) + 2.0 * f.value(&p.coords)).abs() < 1e-13);
    }

    #[test]
    fn gradient_examples() {
        let s = Space::gaussian(2);
        let phi = sample_fns()[0].clone();
        let pts = vec![Point::new(&[0.1, 0.2]), Point::new(&[-1.0, 0.4])];
        let lin = CylinderFunction::linear(phi.clone());
        let g = grad_gamma(&s, &lin, &pts);
        for (p, gx) in pts.iter().zip(&g) {
            assert_eq!(gx.as_slice(), phi.grad(&s, &p.coords).as_slice());
        }
        assert!(grad_gamma(&s, &CylinderFunction::constant(2.0), &pts).iter().all(|v| v.iter().all(|c| *c == 0.0)));
        let sq = CylinderFunction::new(Outer::ExpPoly { poly: Polynomial::monomial(1.0, &[2]), tilt: vec![0.0] }, vec![phi.clone()]);
        let total: f64 = pts.iter().map(|p| phi.value(&p.coords)).sum();
        let g2 = grad_gamma(&s, &sq, &pts);
        for (p, gx) in pts.iter().zip(&g2) {
            let e = phi.grad(&s, &p.coords);
            for a in 0..2 {
                assert!((gx[a] - 2.0 * total * e[a]).abs() < 1e-14);
            }
            // Single moved point finite difference.
        }
        let h = 1e-6;
        for i in 0..2 {
            for a in 0..2 {
                let mut up = pts.clone();
                let mut dn = pts.clone();
                up[i].coords[a] += h;
                dn[i].coords[a] -= h;
                let fd = (sq.eval_points(&up) - sq.eval_points(&dn)) / (2.0 * h);
                assert!((fd - g2[i][a]).abs() < 1e-7);
            }
        }
    }

    fn one_form_field(coeff: TestFunction, mask: u64) -> SymmetricFormField {
        symmetrize(RawFormField { m: 1, terms: vec![ProductTerm { weight: 1.0, factors: vec![SlotFactor::frame(mask, coeff)] }] }).unwrap()
    }

    fn two_point_field() -> SymmetricFormField {
        let f = sample_fns();
        symmetrize(RawFormField {
            m: 2,
            terms: vec![
                ProductTerm { weight: 1.0, factors: vec![SlotFactor::frame(1, f[0].clone()), SlotFactor::frame(2, f[1].clone())] },
                ProductTerm { weight: -0.5, factors: vec![SlotFactor::frame(1, f[2].clone()), SlotFactor::frame(1, f[0].clone())] },
            ],
        })
        .unwrap()
    }

    #[test]
    fn eval_form_examples() {
        let s = Space::gaussian(2);
        let phi = sample_fns()[0].clone();
        let w = CylinderForm::single(&s, CylinderFunction::constant(1.0), one_form_field(phi.clone(), 1)).unwrap();
        let pts = vec![Point::new(&[0.1, 0.2]), Point::new(&[-1.0, 0.4])];
        let v = eval_form_points(&s, &w, &pts);
        for (i, p) in pts.iter().enumerate() {
            let c = v.comp(&[i]).unwrap();
            assert_eq!(c.coeff(1), phi.value(&p.coords));
            assert_eq!(c.len(), 1);
        }
        let om = two_point_field();
        let w2 = CylinderForm::single(&s, CylinderFunction::constant(1.0), om.clone()).unwrap();
        assert!(eval_form_points(&s, &w2, &pts[..1]).comps.is_empty());
        let v2 = eval_form_points(&s, &w2, &pts);
        let direct = om.eval_points(&s, &pts).scale(2f64.sqrt());
        assert!(v2.comp(&[0, 1]).unwrap().max_abs_diff(&direct) < 1e-15);
    }

    #[test]
    fn symmetric_fields_are_symmetric_and_symmetrization_is_idempotent() {
        let s = Space::gaussian(2);
        let om = two_point_field();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let y = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let a = om.eval(&s, &[&x, &y]);
            let b = om.eval(&s, &[&y, &x]).permute_slots(&[1, 0]);
            assert!(a.max_abs_diff(&b) < 1e-15);
            let twice = symmetrize_values(2, &[&x[..], &y[..]], |p| om.eval(&s, p));
            assert!(twice.max_abs_diff(&a) < 1e-12);
        }
        // Equal factors in a (1,1) block are antisymmetric under the slot swap.
        let f = sample_fns()[0].clone();
        let anti = symmetrize(RawFormField {
            m: 2,
            terms: vec![ProductTerm { weight: 1.0, factors: vec![SlotFactor::frame(1, f.clone()), SlotFactor::frame(1, f)] }],
        })
        .unwrap();
        assert!(anti.eval(&s, &[&[0.3, 0.1], &[-0.2, 0.5]]).max_abs() < 1e-16);
        assert!(symmetrize(RawFormField { m: 1, terms: vec![ProductTerm { weight: 1.0, factors: vec![SlotFactor::frame(0, sample_fns()[0].clone())] }] }).is_err());
    }

    #[test]
    fn cylinder_locality() {
        let s = Space::gaussian(2);
        let f = CylinderFunction::linear(TestFunction::bump(&[0.0, 0.0], 1.0, 1.0));
        let om = one_form_field(TestFunction::bump(&[0.2, 0.0], 0.8, 1.0), 2);
        let w = CylinderForm::single(&s, f.clone(), om).unwrap();
        let pts = vec![Point::new(&[0.1, 0.2]), Point::new(&[-0.3, 0.4])];
        let mut more = pts.clone();
        more.push(Point::new(&[3.0, 3.0]));
        more.push(Point::new(&[-2.0, 0.0]));
        assert_eq!(f.eval_points(&pts), f.eval_points(&more));
        assert_eq!(eval_form_points(&s, &w, &pts), eval_form_points(&s, &w, &more));
    }

    #[test]
    fn inner_product_matches_brute_force_expansion() {
        let s = Space::gaussian(2);
        let fns = sample_fns();
        let w = CylinderForm::single(&s, CylinderFunction::exponential(fns[0].clone(), -0.5), two_point_field())
            .unwrap()
            .plus(&CylinderForm::single(&s, CylinderFunction::linear(fns[1].clone()), one_form_field(fns[2].clone(), 3)).unwrap())
            .unwrap();
        let pts = vec![Point::new(&[0.1, 0.2]), Point::new(&[-0.3, 0.4]), Point::new(&[0.5, -0.6])];
        let conf = Configuration { points: pts.clone(), window: Window::All };
        let got = inner_forms(&s, &w, &w, &conf).unwrap();
        // Brute force: for every subset, sum of squared coefficients over all blocks.
        let mut brute = 0.0;
        for m in 1..=2 {
            for sub in m_subsets(3, m) {
                let mut acc = Multivector::zero(2, m);
                for t in &w.terms {
                    if t.m() != m {
                        continue;
                    }
                    let rest: Vec<Point> = (0..3).filter(|i| !sub.contains(i)).map(|i| pts[i].clone()).collect();
                    let xs: Vec<Point> = sub.iter().map(|&i| pts[i].clone()).collect();
                    acc.add_assign(&t.omega.eval_points(&s, &xs).scale(t.f.eval_points(&rest) * factorial(m).sqrt()));
                }
                brute += acc.terms().map(|(_, v)| v * v).sum::<f64>();
            }
        }
        assert!((got - brute).abs() < 1e-13);
        let v = CylinderForm::single(&s, CylinderFunction::constant(1.0), one_form_field(fns[0].clone(), 3)).unwrap();
        let u = CylinderForm::single(&s, CylinderFunction::constant(1.0), two_point_field()).unwrap();
        assert_eq!(inner_forms(&s, &v, &u, &conf).unwrap(), 0.0);
        assert!(inner_forms(&s, &u, &CylinderForm::function(CylinderFunction::constant(1.0)), &conf).is_err());
    }

    #[test]
    fn i_n_is_the_product_representation() {
        let s = Space::gaussian(2);
        let fns = sample_fns();
        let w = CylinderForm::single(&s, CylinderFunction::exponential(fns[0].clone(), -0.5), two_point_field()).unwrap();
        let gamma = vec![Point::new(&[0.1, 0.2]), Point::new(&[-0.3, 0.4])];
        let xbar = vec![Point::new(&[0.5, -0.6]), Point::new(&[0.9, 0.1])];
        let lhs = i_n_component(&s, &w, &gamma, &xbar).unwrap();
        let rep = i_n_apply(&w);
        let rhs = rep.eval(&s, &gamma, &xbar);
        assert!(lhs.max_abs_diff(&rhs) < 1e-14);
        let back = i_n_inverse(&rep);
        let v1 = eval_form_points(&s, &w, &[gamma.clone(), xbar.clone()].concat());
        let v2 = eval_form_points(&s, &back, &[gamma.clone(), xbar.clone()].concat());
        assert_eq!(v1, v2);
        assert_eq!(i_n_component(&s, &w, &gamma, &[gamma[0].clone(), xbar[0].clone()]), Err(Error::UndefinedPoint));
    }

    #[test]
    fn directional_derivative_and_divergence() {
        let s = Space::gaussian(2);
        let phi = sample_fns()[1].clone();
        let pts = vec![Point::new(&[0.1, 0.2]), Point::new(&[-0.3, 0.4])];
        let f = CylinderFunction::linear(phi.clone());
        // V = ∇^Γ F realized as two frame terms with coefficients ∂_1 φ, ∂_2 φ is
        // not a test function; use the linear-field shape with a = 0 instead.
        let konst = LiftedVector::new(
            CylinderForm::single(
                &s,
                CylinderFunction::constant(1.0),
                symmetrize(RawFormField { m: 1, terms: vec![ProductTerm { weight: 1.0, factors: vec![SlotFactor::linear(vec![0.0; 4], vec![0.3, -0.4], TestFunction::constant(1.0))] }] }).unwrap(),
            )
            .unwrap(),
        )
        .unwrap();
        assert_eq!(div_gamma(&s, &konst, &pts).unwrap(), 0.0);
        let dir = directional(&s, &f, &konst, &pts);
        let expect: f64 = pts.iter().map(|p| { let g = phi.grad(&s, &p.coords); 0.3 * g[0] - 0.4 * g[1] }).sum();
        assert!((dir - expect).abs() < 1e-14);
        // div of a non-γ-dependent field is the sum of pointwise divergences.
        let rot = LiftedVector::new(
            CylinderForm::single(
                &s,
                CylinderFunction::constant(1.0),
                symmetrize(RawFormField { m: 1, terms: vec![ProductTerm { weight: 1.0, factors: vec![SlotFactor::linear(vec![1.0, 2.0, 0.0, -1.0], vec![0.0, 0.0], phi.clone())] }] }).unwrap(),
            )
            .unwrap(),
        )
        .unwrap();
        let h = 1e-6;
        let fd_div = |x: &[f64]| {
            let v = |y: [f64; 2]| {
                let p = Point::new(&y);
                rot.eval(&s, std::slice::from_ref(&p))[0].clone()
            };
            (v([x[0] + h, x[1]])[0] - v([x[0] - h, x[1]])[0] + v([x[0], x[1] + h])[1] - v([x[0], x[1] - h])[1]) / (2.0 * h)
        };
        let expect: f64 = pts.iter().map(|p| fd_div(&p.coords)).sum();
        assert!((div_gamma(&s, &rot, &pts).unwrap() - expect).abs() < 1e-7);
    }

    #[test]
    fn sphere_divergence_of_linear_field() {
        // Compare with the covariant divergence through the frame and geodesics.
        let s = Space::sphere2();
        let f = SlotFactor::linear(vec![0.0, -1.0, 0.2, 1.0, 0.0, 0.5, 0.3, -0.5, 0.4], vec![0.1, 0.2, -0.3], TestFunction::gaussian(&[0.0, 0.3, 0.9], 0.8, 1.0));
        let p = s.project(&[0.3, -0.2, 0.7]);
        let h = 1e-5;
        let mut fd = 0.0;
        for a in 0..2 {
            let mut e = [0.0, 0.0];
            e[a] = 1.0;
            let up = s.exp_map(&p, &e, h).unwrap();
            let dn = s.exp_map(&p, &e, -h).unwrap();
            let vu = f.eval::<f64>(&s, &up.coords, 1, 0);
            let vd = f.eval::<f64>(&s, &dn.coords, 1, 0);
            let tu = s.transport_matrix(&up, &p).unwrap();
            let td = s.transport_matrix(&dn, &p).unwrap();
            let cu: Vec<f64> = (0..2).map(|b| vu.coeff(1 << b)).collect();
            let cd: Vec<f64> = (0..2).map(|b| vd.coeff(1 << b)).collect();
            let ua = tu[(a, 0)] * cu[0] + tu[(a, 1)] * cu[1];
            let da = td[(a, 0)] * cd[0] + td[(a, 1)] * cd[1];
            fd += (ua - da) / (2.0 * h);
        }
        assert!((f.divergence(&s, &p.coords).unwrap() - fd).abs() < 1e-8);
    }

    #[test]
    fn hyperdual_evaluation_gives_exact_point_derivatives() {
        let s = Space::gaussian(2);
        let w = CylinderForm::single(&s, CylinderFunction::exponential(sample_fns()[0].clone(), -0.5), two_point_field()).unwrap();
        let pts = vec![Point::new(&[0.1, 0.2]), Point::new(&[-0.3, 0.4]), Point::new(&[0.5, -0.6])];
        let mut seeded: Vec<Coords<HyperDual>> = pts.iter().map(|p| p.coords.iter().map(|c| HyperDual::cst(*c)).collect()).collect();
        seeded[1][0].e1 = 1.0;
        seeded[2][1].e2 = 1.0;
        let v = eval_form_coords(&s, &w, &seeded);
        let h = 1e-4;
        let at = |d1: f64, d2: f64| {
            let mut q = pts.clone();
            q[1].coords[0] += d1;
            q[2].coords[1] += d2;
            eval_form_points(&s, &w, &q)
        };
        let fd = |k: &Vec<usize>, key: u64| {
            let g = |d1, d2| at(d1, d2).comp(k).map_or(0.0, |m| m.coeff(key));
            (g(h, h) - g(h, -h) - g(-h, h) + g(-h, -h)) / (4.0 * h * h)
        };
        for (k, mv) in &v.comps {
            for (key, c) in mv.terms() {
                assert!((c.e12 - fd(k, key)).abs() < 1e-6);
            }
        }
    }
}
