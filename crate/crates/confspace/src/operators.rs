//! One-point operators on `X`, their lifts to the configuration space, and the
//! identity checks tying them together.
//!
//! Two derivative engines are available. [`Backend::Analytic`] seeds point
//! coordinates with hyper-dual numbers and is exact on flat spaces.
//! [`Backend::Fd`] differentiates along geodesics and brings moved values back
//! by parallel transport, which makes it frame independent on curved spaces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exterior::{block_potential, curvature_operator, BlockOperator, Multivector, OperatorField, SlotOperator};
use crate::forms::{
    beta_pairing, coords_of, directional, div_gamma, eval_form_coords, eval_form_points, CylinderForm, CylinderFunction,
    FormValue, LiftedVector, SymmetricFormField, TestFunction,
};
use crate::geometry::{Coords, Point, Space, Window};
use crate::pointprocess::{run_mc, McEstimate, McPlan, MeckeReport, Sampler};
use crate::scalar::{HyperDual, Scalar, Smooth};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FdOrder {
    Central2,
    /// Central differences at `h` and `2h` combined by Richardson extrapolation.
    Central4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdScheme {
    pub h: f64,
    pub order: FdOrder,
}

impl FdScheme {
    pub fn new(h: f64, order: FdOrder) -> Result<Self> {
        if !(1e-6..=1e-2).contains(&h) {
            return Err(Error::FdStep(h));
        }
        Ok(Self { h, order })
    }
}

impl Default for FdScheme {
    fn default() -> Self {
        Self { h: 1e-3, order: FdOrder::Central4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backend {
    Analytic,
    Fd(FdScheme),
}

impl Backend {
    /// Analytic on flat spaces, default finite differences otherwise.
    pub fn auto(space: &Space) -> Self {
        if space.is_flat() {
            Backend::Analytic
        } else {
            Backend::Fd(FdScheme::default())
        }
    }

    fn check(&self, space: &Space) -> Result<()> {
        match self {
            Backend::Analytic if !space.is_flat() => Err(Error::Unsupported("analytic derivatives on a curved space".into())),
            Backend::Fd(s) => FdScheme::new(s.h, s.order).map(|_| ()),
            _ => Ok(()),
        }
    }
}

/// `H_σ φ = -Δφ - ⟨β, ∇φ⟩`.
pub fn h_sigma(space: &Space, phi: &TestFunction, p: &Point) -> f64 {
    let g = phi.grad(space, &p.coords);
    let b = space.beta(p);
    -phi.laplacian(space, &p.coords) - b.components.iter().zip(&g).map(|(x, y)| x * y).sum::<f64>()
}

/// `H_πσ F(γ)` by the chain rule through the outer function.
pub fn h_pi_sigma(space: &Space, f: &CylinderFunction, pts: &[Point]) -> f64 {
    if f.inner.is_empty() {
        return 0.0;
    }
    let inside: Vec<&Point> = pts.iter().filter(|p| f.window.contains(&p.coords)).collect();
    let s: Vec<f64> = f.inner.iter().map(|phi| inside.iter().map(|p| phi.value(&p.coords)).sum()).collect();
    let (_, g, h) = f.outer.jet(&s);
    let n = f.inner.len();
    let mut acc = 0.0;
    for p in inside {
        let grads: Vec<Coords<f64>> = f.inner.iter().map(|phi| phi.grad(space, &p.coords)).collect();
        for i in 0..n {
            acc += g[i] * h_sigma(space, &f.inner[i], p);
            for j in 0..n {
                acc -= h[i * n + j] * grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    acc
}

/// `e_{p,a} ∧ W`, opening a slot for `p` where it has none.
pub fn wedge_at<T: Scalar>(fv: &FormValue<T>, p: usize, a: usize) -> FormValue<T> {
    let mut out = FormValue::zero(fv.dim, fv.degree + 1);
    for (s, mv) in &fv.comps {
        match s.binary_search(&p) {
            Ok(pos) => out.add_comp(s.clone(), &mv.ext(pos, a)),
            Err(pos) => {
                let mut s2 = s.clone();
                s2.insert(pos, p);
                out.add_comp(s2, &mv.insert_slot(pos).ext(pos, a));
            }
        }
    }
    out
}

/// `ι_{e_{p,a}} W`; blades left empty at `p` move to the smaller subset.
pub fn interior_at<T: Scalar>(fv: &FormValue<T>, p: usize, a: usize) -> FormValue<T> {
    let d = fv.dim;
    let mut out = FormValue::zero(d, fv.degree.saturating_sub(1));
    for (s, mv) in &fv.comps {
        let Ok(pos) = s.binary_search(&p) else { continue };
        let r = mv.interior(pos, a);
        let mut kept = Multivector::zero(d, s.len());
        let mut dropped = Multivector::zero(d, s.len());
        for (k, v) in r.terms() {
            if r.slot_mask(k, pos) == 0 {
                dropped.add_term(k, v);
            } else {
                kept.add_term(k, v);
            }
        }
        out.add_comp(s.clone(), &kept);
        if !dropped.is_empty() {
            let mut s2 = s.clone();
            s2.remove(pos);
            out.add_comp(s2, &dropped.remove_slot(pos));
        }
    }
    out
}

fn sum_scaled(dim: usize, degree: usize, parts: impl IntoIterator<Item = (f64, FormValue)>) -> FormValue {
    let mut out = FormValue::zero(dim, degree);
    for (c, v) in parts {
        if c != 0.0 {
            out.add_scaled(&v, c);
        }
    }
    out
}

/// Value, gradient and Hessian of `W(γ)` in the coordinates of one point.
struct Jet {
    v: FormValue,
    g: Vec<FormValue>,
    h: Vec<FormValue>,
}

fn seeded(coords: &[Coords<f64>]) -> Vec<Coords<HyperDual>> {
    coords.iter().map(|c| c.iter().map(|x| HyperDual::cst(*x)).collect()).collect()
}

/// Mixed second derivative in coordinates `(p, a)` and `(q, b)`, with the
/// value and both first derivatives.
fn second(space: &Space, w: &CylinderForm, coords: &[Coords<f64>], (p, a): (usize, usize), (q, b): (usize, usize)) -> [FormValue; 4] {
    let mut x = seeded(coords);
    x[p][a].e1 = 1.0;
    x[q][b].e2 = 1.0;
    let v = eval_form_coords(space, w, &x);
    [v.map_coeffs(|c| c.re), v.map_coeffs(|c| c.e1), v.map_coeffs(|c| c.e2), v.map_coeffs(|c| c.e12)]
}

fn point_jet(space: &Space, w: &CylinderForm, coords: &[Coords<f64>], p: usize) -> Jet {
    let d = space.dim();
    let mut g = vec![FormValue::zero(d, w.n); d];
    let mut h = vec![FormValue::zero(d, w.n); d * d];
    let mut v = FormValue::zero(d, w.n);
    for a in 0..d {
        for b in a..d {
            let [val, ga, gb, hab] = second(space, w, coords, (p, a), (p, b));
            if a == 0 && b == 0 {
                v = val;
            }
            if a == b {
                g[a] = ga;
            } else if a == 0 {
                g[b] = gb;
            }
            h[b * d + a] = hab.clone();
            h[a * d + b] = hab;
        }
    }
    Jet { v, g, h }
}

/// Value and gradient only, two directions per evaluation.
fn point_gradient(space: &Space, w: &CylinderForm, coords: &[Coords<f64>], p: usize) -> Jet {
    let d = space.dim();
    let mut g = vec![FormValue::zero(d, w.n); d];
    let mut v = FormValue::zero(d, w.n);
    for a in (0..d).step_by(2) {
        let mut x = seeded(coords);
        x[p][a].e1 = 1.0;
        if a + 1 < d {
            x[p][a + 1].e2 = 1.0;
        }
        let val = eval_form_coords(space, w, &x);
        if a == 0 {
            v = val.map_coeffs(|c| c.re);
        }
        g[a] = val.map_coeffs(|c| c.e1);
        if a + 1 < d {
            g[a + 1] = val.map_coeffs(|c| c.e2);
        }
    }
    Jet { v, g, h: Vec::new() }
}

/// Per-point operators evaluated from an analytic jet.
struct JetOps<'a> {
    space: &'a Space,
    p: usize,
    beta: Vec<f64>,
    dbeta: nalgebra::DMatrix<f64>,
}

impl<'a> JetOps<'a> {
    fn new(space: &'a Space, pt: &Point, p: usize) -> Self {
        Self { space, p, beta: space.beta(pt).components.to_vec(), dbeta: space.grad_beta(pt) }
    }

    fn d(&self, j: &Jet) -> FormValue {
        let dim = self.space.dim();
        let mut out = FormValue::zero(dim, j.v.degree + 1);
        for b in 0..dim {
            out.add_scaled(&wedge_at(&j.g[b], self.p, b), 1.0);
        }
        out
    }

    fn dstar(&self, j: &Jet) -> FormValue {
        let dim = self.space.dim();
        let mut out = FormValue::zero(dim, j.v.degree.saturating_sub(1));
        for a in 0..dim {
            let mut t = j.g[a].clone();
            t.add_scaled(&j.v, self.beta[a]);
            out.add_scaled(&interior_at(&t, self.p, a), -1.0);
        }
        out
    }

    fn bochner(&self, j: &Jet) -> FormValue {
        let dim = self.space.dim();
        sum_scaled(
            dim,
            j.v.degree,
            (0..dim).map(|a| (-1.0, j.h[a * dim + a].clone())).chain((0..dim).map(|a| (-self.beta[a], j.g[a].clone()))),
        )
    }

    fn de_rham(&self, j: &Jet) -> FormValue {
        let dim = self.space.dim();
        let n = j.v.degree;
        // d(d* W) needs the gradient of d* W.
        let mut dds = FormValue::zero(dim, n);
        if n > 0 {
            for b in 0..dim {
                let mut grad_b = FormValue::zero(dim, n - 1);
                for a in 0..dim {
                    let mut t = j.h[a * dim + b].clone();
                    t.add_scaled(&j.v, self.dbeta[(a, b)]);
                    t.add_scaled(&j.g[b], self.beta[a]);
                    grad_b.add_scaled(&interior_at(&t, self.p, a), -1.0);
                }
                dds.add_scaled(&wedge_at(&grad_b, self.p, b), 1.0);
            }
        }
        let dw = self.d(j);
        let mut dsd = FormValue::zero(dim, n);
        for a in 0..dim {
            let mut t = FormValue::zero(dim, n + 1);
            for b in 0..dim {
                t.add_scaled(&wedge_at(&j.h[a * dim + b], self.p, b), 1.0);
            }
            t.add_scaled(&dw, self.beta[a]);
            dsd.add_scaled(&interior_at(&t, self.p, a), -1.0);
        }
        dds.add_scaled(&dsd, 1.0);
        dds
    }
}

type Section<'s> = dyn Fn(&Point) -> Result<FormValue> + 's;

/// Finite-difference operators at point index `p`.
struct FdOps<'a> {
    space: &'a Space,
    scheme: FdScheme,
    p: usize,
}

impl<'a> FdOps<'a> {
    /// Value at `y` with slot `p` carried back to the tangent space at `base`.
    fn at(&self, s: &Section, base: &Point, y: &Point) -> Result<FormValue> {
        let v = s(y)?;
        if self.space.is_flat() {
            return Ok(v);
        }
        let t = self.space.transport_matrix(y, base)?;
        let mut out = FormValue::zero(v.dim, v.degree);
        for (k, mv) in &v.comps {
            match k.binary_search(&self.p) {
                Ok(pos) => out.add_comp(k.clone(), &mv.map_slot(pos, &t)),
                Err(_) => out.add_comp(k.clone(), mv),
            }
        }
        Ok(out)
    }

    fn stencil(&self, s: &Section, base: &Point, a: usize) -> Result<Vec<(f64, FormValue)>> {
        let d = self.space.dim();
        let mut e = vec![0.0; d];
        e[a] = 1.0;
        let steps: &[f64] = match self.scheme.order {
            FdOrder::Central2 => &[1.0, -1.0],
            FdOrder::Central4 => &[1.0, -1.0, 2.0, -2.0],
        };
        steps
            .iter()
            .map(|t| {
                let y = self.space.exp_map(base, &e, t * self.scheme.h)?;
                Ok((*t, self.at(s, base, &y)?))
            })
            .collect()
    }

    fn grad(&self, s: &Section, base: &Point) -> Result<Vec<FormValue>> {
        let h = self.scheme.h;
        (0..self.space.dim())
            .map(|a| {
                let st = self.stencil(s, base, a)?;
                let (dim, deg) = (st[0].1.dim, st[0].1.degree);
                let w: &[f64] = match self.scheme.order {
                    FdOrder::Central2 => &[0.5, -0.5],
                    FdOrder::Central4 => &[8.0 / 12.0, -8.0 / 12.0, -1.0 / 12.0, 1.0 / 12.0],
                };
                Ok(sum_scaled(dim, deg, st.into_iter().zip(w).map(|((_, v), c)| (c / h, v))))
            })
            .collect()
    }

    /// `Σ_a` second covariant derivative along the geodesic in direction `e_a`.
    fn laplacian(&self, s: &Section, base: &Point, center: &FormValue) -> Result<FormValue> {
        let h2 = self.scheme.h * self.scheme.h;
        let mut out = FormValue::zero(center.dim, center.degree);
        for a in 0..self.space.dim() {
            let st = self.stencil(s, base, a)?;
            let (w, c0): (&[f64], f64) = match self.scheme.order {
                FdOrder::Central2 => (&[1.0, 1.0], -2.0),
                FdOrder::Central4 => (&[16.0 / 12.0, 16.0 / 12.0, -1.0 / 12.0, -1.0 / 12.0], -30.0 / 12.0),
            };
            for ((_, v), c) in st.iter().zip(w) {
                out.add_scaled(v, c / h2);
            }
            out.add_scaled(center, c0 / h2);
        }
        Ok(out)
    }

    fn d(&self, s: &Section, base: &Point) -> Result<FormValue> {
        let g = self.grad(s, base)?;
        let mut out = FormValue::zero(g[0].dim, g[0].degree + 1);
        for (b, gb) in g.iter().enumerate() {
            out.add_scaled(&wedge_at(gb, self.p, b), 1.0);
        }
        Ok(out)
    }

    fn dstar(&self, s: &Section, base: &Point) -> Result<FormValue> {
        let g = self.grad(s, base)?;
        let v = s(base)?;
        let beta = self.space.beta(base);
        let mut out = FormValue::zero(v.dim, v.degree.saturating_sub(1));
        for (a, ga) in g.iter().enumerate() {
            let mut t = ga.clone();
            t.add_scaled(&v, beta.components[a]);
            out.add_scaled(&interior_at(&t, self.p, a), -1.0);
        }
        Ok(out)
    }

    fn bochner(&self, s: &Section, base: &Point) -> Result<FormValue> {
        let v = s(base)?;
        let g = self.grad(s, base)?;
        let beta = self.space.beta(base);
        let mut out = self.laplacian(s, base, &v)?.scale(-1.0);
        for (a, ga) in g.iter().enumerate() {
            out.add_scaled(ga, -beta.components[a]);
        }
        Ok(out)
    }

    fn de_rham(&self, s: &Section, base: &Point) -> Result<FormValue> {
        let ds = |y: &Point| self.dstar(s, y);
        let dd = |y: &Point| self.d(s, y);
        let mut out = self.d(&ds, base)?;
        out.add_scaled(&self.dstar(&dd, base)?, 1.0);
        Ok(out)
    }
}

/// Operators that can be lifted from `X` to the configuration space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LiftOp {
    /// `H_πσ`, on 0-forms.
    Dirichlet,
    /// `H^B_πσ`.
    Bochner,
    /// `H^R_πσ`.
    DeRham,
    /// `d^Γ`.
    D,
    /// `d^Γ*`.
    DStar,
}

fn moved(pts: &[Point], p: usize, y: &Point) -> Vec<Point> {
    let mut q = pts.to_vec();
    q[p] = y.clone();
    q
}

/// `Σ_{x ∈ γ} op_x W(γ)`.
pub fn lift(space: &Space, op: LiftOp, w: &CylinderForm, pts: &[Point], backend: Backend) -> Result<FormValue> {
    backend.check(space)?;
    if op == LiftOp::Dirichlet && w.n != 0 {
        return Err(Error::InvalidArgument("the Dirichlet operator acts on functions".into()));
    }
    if op == LiftOp::DStar && w.n == 0 {
        return Err(Error::InvalidArgument("the codifferential needs forms of order at least one".into()));
    }
    let degree = match op {
        LiftOp::D => w.n + 1,
        LiftOp::DStar => w.n - 1,
        _ => w.n,
    };
    let d = space.dim();
    let mut out = FormValue::zero(d, degree);
    let coords = coords_of(pts);
    for p in 0..pts.len() {
        let part = match backend {
            Backend::Analytic => {
                let jet = match op {
                    LiftOp::D | LiftOp::DStar => point_gradient(space, w, &coords, p),
                    _ => point_jet(space, w, &coords, p),
                };
                let ops = JetOps::new(space, &pts[p], p);
                match op {
                    LiftOp::Dirichlet | LiftOp::Bochner => ops.bochner(&jet),
                    LiftOp::DeRham => ops.de_rham(&jet),
                    LiftOp::D => ops.d(&jet),
                    LiftOp::DStar => ops.dstar(&jet),
                }
            }
            Backend::Fd(scheme) => {
                let ops = FdOps { space, scheme, p };
                let s = |y: &Point| Ok(eval_form_points(space, w, &moved(pts, p, y)));
                match op {
                    LiftOp::Dirichlet | LiftOp::Bochner => ops.bochner(&s, &pts[p])?,
                    LiftOp::DeRham => ops.de_rham(&s, &pts[p])?,
                    LiftOp::D => ops.d(&s, &pts[p])?,
                    LiftOp::DStar => ops.dstar(&s, &pts[p])?,
                }
            }
        };
        out.add_scaled(&part, 1.0);
    }
    Ok(out)
}

pub fn d_gamma(space: &Space, w: &CylinderForm, pts: &[Point], backend: Backend) -> Result<FormValue> {
    lift(space, LiftOp::D, w, pts, backend)
}

pub fn dstar_gamma(space: &Space, w: &CylinderForm, pts: &[Point], backend: Backend) -> Result<FormValue> {
    lift(space, LiftOp::DStar, w, pts, backend)
}

/// `d^Γ d^Γ W(γ)` from exact mixed partials in all point coordinates.
pub fn d_gamma_twice(space: &Space, w: &CylinderForm, pts: &[Point]) -> Result<FormValue> {
    Backend::Analytic.check(space)?;
    let d = space.dim();
    let coords = coords_of(pts);
    let mut out = FormValue::zero(d, w.n + 2);
    let idx: Vec<(usize, usize)> = (0..pts.len()).flat_map(|p| (0..d).map(move |a| (p, a))).collect();
    for (i, &(p, a)) in idx.iter().enumerate() {
        for &(q, b) in &idx[i..] {
            let [_, _, _, h] = second(space, w, &coords, (p, a), (q, b));
            out.add_scaled(&wedge_at(&wedge_at(&h, p, a), q, b), 1.0);
            if (p, a) != (q, b) {
                out.add_scaled(&wedge_at(&wedge_at(&h, q, b), p, a), 1.0);
            }
        }
    }
    Ok(out)
}

/// `∇_{x,a} W(γ)` for every point and frame direction.
pub fn covariant_gradient(space: &Space, w: &CylinderForm, pts: &[Point], backend: Backend) -> Result<Vec<Vec<FormValue>>> {
    backend.check(space)?;
    let coords = coords_of(pts);
    (0..pts.len())
        .map(|p| match backend {
            Backend::Analytic => Ok(point_gradient(space, w, &coords, p).g),
            Backend::Fd(scheme) => {
                let ops = FdOps { space, scheme, p };
                let s = |y: &Point| Ok(eval_form_points(space, w, &moved(pts, p, y)));
                ops.grad(&s, &pts[p])
            }
        })
        .collect()
}

/// A form on `X` itself: a function or a one-point form field.
#[derive(Clone, Debug)]
pub enum XForm {
    Function(TestFunction),
    Field(SymmetricFormField),
}

impl XForm {
    fn as_cylinder(&self, space: &Space) -> Result<CylinderForm> {
        match self {
            XForm::Function(phi) => Ok(CylinderForm::function(CylinderFunction::linear(phi.clone()))),
            XForm::Field(om) if om.m() == 1 => CylinderForm::single(space, CylinderFunction::constant(1.0), om.clone()),
            XForm::Field(_) => Err(Error::InvalidArgument("forms on X have one point".into())),
        }
    }
}

/// Collapse the value on the one-point configuration `{p}` to a one-slot multivector.
fn single_slot(space: &Space, v: &FormValue) -> Multivector {
    let mut out = Multivector::zero(space.dim(), 1);
    if let Some(c) = v.comp(&[]) {
        out.add_assign(&c.insert_slot(0));
    }
    if let Some(c) = v.comp(&[0]) {
        out.add_assign(c);
    }
    out
}

/// `op_x ω(x)` for a form on `X`, as a one-slot multivector.
pub fn x_operator(space: &Space, op: LiftOp, omega: &XForm, p: &Point, backend: Backend) -> Result<Multivector> {
    let w = omega.as_cylinder(space)?;
    Ok(single_slot(space, &lift(space, op, &w, std::slice::from_ref(p), backend)?))
}

/// `H^B ω(p)`.
pub fn bochner_x(space: &Space, omega: &XForm, p: &Point, backend: Backend) -> Result<Multivector> {
    x_operator(space, LiftOp::Bochner, omega, p, backend)
}

/// `d ω(p)`.
pub fn d_x(space: &Space, omega: &XForm, p: &Point, backend: Backend) -> Result<Multivector> {
    x_operator(space, LiftOp::D, omega, p, backend)
}

/// `d*_σ ω(p)`.
pub fn dstar_x(space: &Space, omega: &XForm, p: &Point, backend: Backend) -> Result<Multivector> {
    x_operator(space, LiftOp::DStar, omega, p, backend)
}

/// `H^R ω(p)`.
pub fn h_r_x(space: &Space, omega: &XForm, p: &Point, backend: Backend) -> Result<Multivector> {
    x_operator(space, LiftOp::DeRham, omega, p, backend)
}

/// `H_{σ,(n,m)} ω(x̄) = Σ_i op_{x_i} ω(x̄)` for a symmetric `m`-point field.
pub fn field_operator(space: &Space, op: LiftOp, omega: &SymmetricFormField, xbar: &[Point], backend: Backend) -> Result<Multivector> {
    let w = CylinderForm::single(space, CylinderFunction::constant(1.0), omega.clone())?;
    let v = lift(space, op, &w, xbar, backend)?;
    let m = xbar.len();
    let key: Vec<usize> = (0..m).collect();
    let root: f64 = (1..=m).map(|i| i as f64).product::<f64>().sqrt();
    Ok(v.comp(&key).cloned().unwrap_or_else(|| Multivector::zero(space.dim(), m)).scale(1.0 / root))
}

/// `R_σ(x) = R_n(x) - (∇β(x))^{∧n}`.
pub fn weitz_correction(space: &Space, p: &Point, n: usize) -> SlotOperator {
    let mut r = curvature_operator(space, p, n);
    let lb = SlotOperator::leibniz_lift(&space.grad_beta(p), n);
    r.matrix -= lb.matrix;
    r
}

struct Weitzenbock;

impl OperatorField for Weitzenbock {
    fn at(&self, space: &Space, p: &Point, k: usize) -> SlotOperator {
        weitz_correction(space, p, k)
    }
}

/// The block operator `R_πσ` on `m` points for order `n`.
pub fn r_pi_sigma(space: &Space, points: &[Point], n: usize) -> BlockOperator {
    block_potential(space, &Weitzenbock, points, n)
}

/// `R_πσ(γ) W(γ)`, component by component.
pub fn apply_r_pi_sigma(space: &Space, v: &FormValue, pts: &[Point]) -> FormValue {
    let mut out = FormValue::zero(v.dim, v.degree);
    for (k, mv) in &v.comps {
        if k.is_empty() {
            continue;
        }
        let sub: Vec<Point> = k.iter().map(|&i| pts[i].clone()).collect();
        out.add_comp(k.clone(), &r_pi_sigma(space, &sub, v.degree).apply(mv));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    /// `|lhs - rhs| ≤ tol`.
    Eq,
    /// `lhs ≤ rhs + tol`.
    Le,
}

/// Outcome of one identity check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorReport {
    pub identity: String,
    pub lhs: f64,
    pub rhs: f64,
    pub stderr: Option<f64>,
    pub tol: f64,
    pub pass: bool,
    pub seed: Option<u64>,
    pub relation: Relation,
}

impl OperatorReport {
    pub fn deterministic(identity: impl Into<String>, lhs: f64, rhs: f64, tol: f64) -> Self {
        let pass = (lhs - rhs).abs() <= tol;
        Self { identity: identity.into(), lhs, rhs, stderr: None, tol, pass, seed: None, relation: Relation::Eq }
    }

    /// Pass when the paired difference is within `k` combined standard errors.
    pub fn monte_carlo(identity: impl Into<String>, lhs: &McEstimate, rhs: &McEstimate, diff: &McEstimate, k: f64) -> Self {
        let tol = k * diff.stderr;
        Self {
            identity: identity.into(),
            lhs: lhs.mean,
            rhs: rhs.mean,
            stderr: Some(diff.stderr),
            tol,
            pass: diff.mean.abs() <= tol,
            seed: Some(lhs.seed),
            relation: Relation::Eq,
        }
    }

    pub fn from_mecke(identity: impl Into<String>, r: &MeckeReport) -> Self {
        Self::monte_carlo(identity, &r.lhs, &r.rhs, &r.diff, 3.0)
    }

    /// `lhs ≤ rhs + tol`.
    pub fn bound(identity: impl Into<String>, lhs: f64, rhs: f64, tol: f64) -> Self {
        Self { identity: identity.into(), lhs, rhs, stderr: None, tol, pass: lhs <= rhs + tol, seed: None, relation: Relation::Le }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// Paired MC of `a(γ)` against `b(γ)` on a shared configuration stream.
pub fn paired_check<F>(identity: &str, space: &Space, window: &Window, plan: &McPlan, f: F) -> Result<OperatorReport>
where
    F: Fn(&[Point]) -> Result<(f64, f64)> + Sync,
{
    let sampler = Sampler::new(space, window)?;
    let s = run_mc(plan, 2, |rng, out| {
        let g = sampler.sample(rng);
        let (a, b) = f(&g.points)?;
        out[0] = a;
        out[1] = b;
        Ok(())
    })?;
    Ok(OperatorReport::monte_carlo(identity, &s.estimate(0), &s.estimate(1), &s.diff(0, 1), 3.0))
}

/// `E[∇_V F1 · F2] = -E[F1 ∇_V F2] - E[F1 F2 (⟨B_πσ, V⟩ + div^Γ V)]`.
pub fn ibp_check(
    space: &Space,
    f1: &CylinderFunction,
    f2: &CylinderFunction,
    v: &LiftedVector,
    window: &Window,
    plan: &McPlan,
) -> Result<OperatorReport> {
    paired_check("integration by parts", space, window, plan, |pts| {
        let a = f1.eval_points(pts);
        let b = f2.eval_points(pts);
        let lhs = directional(space, f1, v, pts) * b;
        let rhs = -a * directional(space, f2, v, pts) - a * b * (beta_pairing(space, v, pts) + div_gamma(space, v, pts)?);
        Ok((lhs, rhs))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirichletLevel {
    Functions,
    Bochner,
    DeRham,
}

/// Form expression `E(W1, W2)` against `E⟨H W1, W2⟩`.
pub fn dirichlet_check(
    space: &Space,
    level: DirichletLevel,
    w1: &CylinderForm,
    w2: &CylinderForm,
    window: &Window,
    plan: &McPlan,
    backend: Backend,
) -> Result<OperatorReport> {
    if w1.n != w2.n {
        return Err(Error::InvalidArgument("forms of different order".into()));
    }
    if level == DirichletLevel::Functions && w1.n != 0 {
        return Err(Error::InvalidArgument("function level needs 0-forms".into()));
    }
    let name = match level {
        DirichletLevel::Functions => "dirichlet form (functions)",
        DirichletLevel::Bochner => "dirichlet form (bochner)",
        DirichletLevel::DeRham => "dirichlet form (de rham)",
    };
    paired_check(name, space, window, plan, |pts| {
        let v2 = eval_form_points(space, w2, pts);
        match level {
            DirichletLevel::Functions | DirichletLevel::Bochner => {
                let g1 = covariant_gradient(space, w1, pts, backend)?;
                let g2 = covariant_gradient(space, w2, pts, backend)?;
                let form: f64 = g1.iter().zip(&g2).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.inner(y))).sum();
                let op = if level == DirichletLevel::Functions { LiftOp::Dirichlet } else { LiftOp::Bochner };
                Ok((form, lift(space, op, w1, pts, backend)?.inner(&v2)))
            }
            DirichletLevel::DeRham => {
                let mut form = d_gamma(space, w1, pts, backend)?.inner(&d_gamma(space, w2, pts, backend)?);
                if w1.n > 0 {
                    form += dstar_gamma(space, w1, pts, backend)?.inner(&dstar_gamma(space, w2, pts, backend)?);
                }
                Ok((form, lift(space, LiftOp::DeRham, w1, pts, backend)?.inner(&v2)))
            }
        }
    })
}

/// `E⟨d^Γ W, V⟩ = E⟨W, d^Γ* V⟩` with `V` of order one higher.
pub fn adjointness_check(space: &Space, w: &CylinderForm, v: &CylinderForm, window: &Window, plan: &McPlan, backend: Backend) -> Result<OperatorReport> {
    if v.n != w.n + 1 {
        return Err(Error::InvalidArgument("orders must differ by one".into()));
    }
    paired_check("d / d* adjointness", space, window, plan, |pts| {
        let lhs = d_gamma(space, w, pts, backend)?.inner(&eval_form_points(space, v, pts));
        let rhs = eval_form_points(space, w, pts).inner(&dstar_gamma(space, v, pts, backend)?);
        Ok((lhs, rhs))
    })
}

/// `∫_X ⟨dω, η⟩ dσ` against `∫_X ⟨ω, d*η⟩ dσ` by quadrature.
pub fn adjointness_x(space: &Space, omega: &XForm, eta: &XForm, window: &Window, rtol: f64, backend: Backend) -> Result<(f64, f64)> {
    let w_eta = eta.as_cylinder(space)?;
    let w_om = omega.as_cylinder(space)?;
    let pair = |p: &Point, left: bool| -> Result<f64> {
        let one = std::slice::from_ref(p);
        if left {
            let a = single_slot(space, &d_gamma(space, &w_om, one, backend)?);
            Ok(a.inner(&single_slot(space, &eval_form_points(space, &w_eta, one))))
        } else {
            let b = single_slot(space, &dstar_gamma(space, &w_eta, one, backend)?);
            Ok(single_slot(space, &eval_form_points(space, &w_om, one)).inner(&b))
        }
    };
    let run = |left: bool| -> Result<f64> {
        let err = std::sync::Mutex::new(None);
        let v = space.integrate(window, rtol, |p| {
            pair(p, left).unwrap_or_else(|e| {
                *err.lock().unwrap() = Some(e);
                0.0
            })
        })?;
        match err.into_inner().unwrap() {
            Some(e) => Err(e),
            None => Ok(v),
        }
    };
    Ok((run(true)?, run(false)?))
}

/// Largest componentwise deviation in `H^R W - H^B W - R_πσ W` at `γ`.
pub fn weitzenbock_residual(space: &Space, w: &CylinderForm, pts: &[Point], backend: Backend) -> Result<f64> {
    let hr = lift(space, LiftOp::DeRham, w, pts, backend)?;
    let hb = lift(space, LiftOp::Bochner, w, pts, backend)?;
    let r = apply_r_pi_sigma(space, &eval_form_points(space, w, pts), pts);
    let mut rhs = hb;
    rhs.add_scaled(&r, 1.0);
    Ok(hr.max_abs_diff(&rhs))
}

/// Largest deviation of `I^n(lift W)(γ, x̄)` from `(H_πσ ⊞ H_{σ,(n,m)}) I^n W (γ, x̄)`
/// for `op` in Bochner or de Rham (or Dirichlet on 0-forms with `x̄ = ∅`).
pub fn factorization_residual(space: &Space, op: LiftOp, w: &CylinderForm, gamma: &[Point], xbar: &[Point], backend: Backend) -> Result<f64> {
    let m = xbar.len();
    let mut all = gamma.to_vec();
    all.extend_from_slice(xbar);
    let lifted = lift(space, op, w, &all, backend)?;
    let key: Vec<usize> = (gamma.len()..all.len()).collect();
    let root: f64 = (1..=m).map(|i| i as f64).product::<f64>().sqrt();
    let lhs = lifted.comp(&key).cloned().unwrap_or_else(|| Multivector::zero(space.dim(), m)).scale(1.0 / root);
    let mut rhs = Multivector::zero(space.dim(), m);
    for t in w.terms.iter().filter(|t| t.m() == m) {
        let f = t.f.eval_points(gamma);
        let hf = h_pi_sigma(space, &t.f, gamma);
        if m == 0 {
            rhs.add_assign(&Multivector::scalar(space.dim(), 0, hf));
            continue;
        }
        rhs.add_assign(&t.omega.eval_points(space, xbar).scale(hf));
        rhs.add_assign(&field_operator(space, op, &t.omega, xbar, backend)?.scale(f));
    }
    Ok(lhs.max_abs_diff(&rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::{symmetrize, Outer, Polynomial, ProductTerm, RawFormField, SlotFactor};

    fn x1() -> TestFunction {
        TestFunction::coordinate(0, 2)
    }

    fn x1dx1() -> SymmetricFormField {
        symmetrize(RawFormField { m: 1, terms: vec![ProductTerm { weight: 1.0, factors: vec![SlotFactor::frame(1, x1())] }] }).unwrap()
    }

    fn field(coeff: TestFunction, mask: u64) -> SymmetricFormField {
        symmetrize(RawFormField { m: 1, terms: vec![ProductTerm { weight: 1.0, factors: vec![SlotFactor::frame(mask, coeff)] }] }).unwrap()
    }

    fn fd() -> Backend {
        Backend::Fd(FdScheme::default())
    }

    #[test]
    fn fd_scheme_bounds() {
        assert!(FdScheme::new(1e-3, FdOrder::Central4).is_ok());
        assert_eq!(FdScheme::new(1e-7, FdOrder::Central2), Err(Error::FdStep(1e-7)));
        assert!(FdScheme::new(0.1, FdOrder::Central2).is_err());
    }

    #[test]
    fn h_sigma_examples() {
        let s = Space::gaussian(2);
        let p = Point::new(&[0.7, -0.3]);
        assert!((h_sigma(&s, &x1(), &p) - 0.7).abs() < 1e-15);
        assert_eq!(h_sigma(&s, &TestFunction::constant(3.0), &p), 0.0);
        let half = TestFunction::polynomial(Polynomial::monomial(0.5, &[2, 0]).plus(0.5, &[0, 2]));
        assert!((h_sigma(&s, &half, &p) - (-2.0 + 0.58)).abs() < 1e-14);
    }

    #[test]
    fn h_pi_sigma_examples() {
        let s = Space::gaussian(2);
        let phi = TestFunction::gaussian(&[0.2, 0.1], 0.9, 1.0);
        let pts = vec![Point::new(&[0.1, 0.2]), Point::new(&[-0.5, 0.4]), Point::new(&[1.0, -0.3])];
        let lin = h_pi_sigma(&s, &CylinderFunction::linear(phi.clone()), &pts);
        let direct: f64 = pts.iter().map(|p| h_sigma(&s, &phi, p)).sum();
        assert!((lin - direct).abs() < 1e-14);
        assert_eq!(h_pi_sigma(&s, &CylinderFunction::constant(2.0), &pts), 0.0);
        assert_eq!(h_pi_sigma(&s, &CylinderFunction::linear(phi.clone()), &[]), 0.0);
        // Nonlinear outer function against the lifted Bochner operator on 0-forms.
        let f = CylinderFunction::new(Outer::Cosine { freq: vec![1.3, -0.4], phase: 0.2, amplitude: 1.0 }, vec![phi, TestFunction::bump(&[0.0, 0.0], 1.5, 1.0)]);
        let via = lift(&s, LiftOp::Dirichlet, &CylinderForm::function(f.clone()), &pts, Backend::Analytic).unwrap();
        assert!((via.comp(&[]).unwrap().coeff(0) - h_pi_sigma(&s, &f, &pts)).abs() < 1e-12);
    }

    #[test]
    fn ou_eigenform_examples() {
        let s = Space::gaussian(2);
        let om = XForm::Field(x1dx1());
        let p = Point::new(&[0.6, -1.1]);
        for b in [Backend::Analytic, fd()] {
            let tol = if b == Backend::Analytic { 1e-13 } else { 1e-7 };
            let hb = bochner_x(&s, &om, &p, b).unwrap();
            assert!((hb.coeff(1) - 0.6).abs() < tol && hb.len() == 1, "{hb:?}");
            let hr = h_r_x(&s, &om, &p, b).unwrap();
            assert!((hr.coeff(1) - 1.2).abs() < tol && hr.len() == 1, "{hr:?}");
            let ds = dstar_x(&s, &om, &p, b).unwrap();
            assert!((ds.coeff(0) + (1.0 - 0.36)).abs() < tol);
            assert!(d_x(&s, &om, &p, b).unwrap().max_abs() < tol);
            let x2dx1 = XForm::Field(field(TestFunction::coordinate(1, 2), 1));
            let dd = d_x(&s, &x2dx1, &p, b).unwrap();
            assert!((dd.coeff(3) + 1.0).abs() < tol);
            let c = XForm::Field(field(TestFunction::constant(2.0), 1));
            assert!((dstar_x(&s, &c, &p, b).unwrap().coeff(0) - 2.0 * 0.6).abs() < tol);
            assert!(bochner_x(&s, &c, &p, b).unwrap().max_abs() < tol);
            let g = d_x(&s, &XForm::Function(x1()), &p, b).unwrap();
            assert!((g.coeff(1) - 1.0).abs() < tol && g.len() == 1);
        }
    }

    #[test]
    fn weitzenbock_corrections() {
        let s = Space::gaussian(2);
        let p = Point::new(&[0.3, 0.4]);
        for n in 0..=2 {
            assert_eq!(weitz_correction(&s, &p, n).matrix, SlotOperator::scaled_identity(2, n, n as f64).matrix);
        }
        let sph = Space::sphere2();
        let q = sph.project(&[0.2, 0.3, 0.8]);
        let r = weitz_correction(&sph, &q, 1);
        assert!((r.matrix.clone() - SlotOperator::identity(2, 1).matrix).abs().max() < 1e-14);
        let flat = Space::euclidean(3, crate::geometry::Intensity::Uniform).unwrap();
        assert!(weitz_correction(&flat, &Point::new(&[1.0, 2.0, 3.0]), 2).matrix.iter().all(|v| *v == 0.0));
    }

    fn battery() -> Vec<CylinderForm> {
        let s = Space::gaussian(2);
        let phi = TestFunction::gaussian(&[0.3, -0.2], 0.8, 1.0);
        let psi = TestFunction::gaussian_poly(&[-0.2, 0.4], 0.7, Polynomial::monomial(1.0, &[1, 0]).plus(0.5, &[0, 1]));
        let two = symmetrize(RawFormField {
            m: 2,
            terms: vec![ProductTerm { weight: 1.0, factors: vec![SlotFactor::frame(1, phi.clone()), SlotFactor::frame(2, psi.clone())] }],
        })
        .unwrap();
        let f = CylinderFunction::new(Outer::ExpPoly { poly: Polynomial::monomial(1.0, &[1]).plus(0.5, &[0]), tilt: vec![-0.3] }, vec![phi.clone()]);
        vec![
            CylinderForm::single(&s, CylinderFunction::constant(1.0), x1dx1()).unwrap(),
            CylinderForm::single(&s, f.clone(), field(psi.clone(), 2)).unwrap(),
            CylinderForm::single(&s, CylinderFunction::exponential(psi.clone(), 0.4), two).unwrap(),
            CylinderForm::single(&s, f, field(phi.clone(), 3)).unwrap(),
        ]
    }

    fn config() -> Vec<Point> {
        vec![Point::new(&[0.1, 0.2]), Point::new(&[-0.5, 0.4]), Point::new(&[1.0, -0.3])]
    }

    #[test]
    fn analytic_and_fd_backends_agree() {
        let s = Space::gaussian(2);
        let pts = config();
        for w in battery() {
            for op in [LiftOp::Bochner, LiftOp::DeRham, LiftOp::D, LiftOp::DStar] {
                let a = lift(&s, op, &w, &pts, Backend::Analytic).unwrap();
                let b = lift(&s, op, &w, &pts, fd()).unwrap();
                assert!(a.max_abs_diff(&b) < 1e-6, "{op:?}: {}", a.max_abs_diff(&b));
            }
        }
    }

    #[test]
    fn weitzenbock_on_the_plane() {
        let s = Space::gaussian(2);
        for w in battery() {
            assert!(weitzenbock_residual(&s, &w, &config(), Backend::Analytic).unwrap() < 1e-10);
        }
        let flat = Space::euclidean(2, crate::geometry::Intensity::Uniform).unwrap();
        for w in battery() {
            let hr = lift(&flat, LiftOp::DeRham, &w, &config(), Backend::Analytic).unwrap();
            let hb = lift(&flat, LiftOp::Bochner, &w, &config(), Backend::Analytic).unwrap();
            assert!(hr.max_abs_diff(&hb) < 1e-12);
        }
    }

    #[test]
    fn d_squared_vanishes() {
        let s = Space::gaussian(2);
        let f = CylinderFunction::new(
            Outer::Cosine { freq: vec![1.0, 0.7], phase: 0.1, amplitude: 1.0 },
            vec![TestFunction::gaussian(&[0.3, -0.2], 0.8, 1.0), TestFunction::coordinate(1, 2)],
        );
        let mut forms = battery();
        forms.push(CylinderForm::function(f));
        for w in forms {
            let dd = d_gamma_twice(&s, &w, &config()).unwrap();
            assert!(dd.max_abs() <= 1e-10);
        }
    }

    #[test]
    fn factorization_on_the_plane() {
        let s = Space::gaussian(2);
        let gamma = config();
        for w in battery() {
            for m in 1..=2 {
                let xbar: Vec<Point> = [Point::new(&[0.35, -0.6]), Point::new(&[-0.15, 0.05])][..m].to_vec();
                for op in [LiftOp::Bochner, LiftOp::DeRham] {
                    let r = factorization_residual(&s, op, &w, &gamma, &xbar, Backend::Analytic).unwrap();
                    assert!(r < 1e-10, "{op:?} m={m}: {r}");
                }
            }
        }
        let f = CylinderForm::function(CylinderFunction::exponential(TestFunction::coordinate(0, 2), 0.3));
        assert!(factorization_residual(&s, LiftOp::Dirichlet, &f, &gamma, &[], Backend::Analytic).unwrap() < 1e-12);
    }

    fn killing(a: [f64; 3]) -> SymmetricFormField {
        // x ↦ a × x.
        let m = vec![0.0, -a[2], a[1], a[2], 0.0, -a[0], -a[1], a[0], 0.0];
        symmetrize(RawFormField { m: 1, terms: vec![ProductTerm { weight: 1.0, factors: vec![SlotFactor::linear(m, vec![0.0; 3], TestFunction::constant(1.0))] }] }).unwrap()
    }

    fn gradient_of_linear(a: [f64; 3]) -> SymmetricFormField {
        // Tangential part of the constant field a.
        symmetrize(RawFormField { m: 1, terms: vec![ProductTerm { weight: 1.0, factors: vec![SlotFactor::linear(vec![0.0; 9], a.to_vec(), TestFunction::constant(1.0))] }] }).unwrap()
    }

    #[test]
    fn sphere_killing_and_gradient_forms() {
        let s = Space::sphere2();
        let p = s.project(&[0.3, -0.4, 0.6]);
        let k = XForm::Field(killing([0.2, -0.5, 0.7]));
        let val = single_slot(&s, &eval_form_points(&s, &k.as_cylinder(&s).unwrap(), std::slice::from_ref(&p)));
        let hb = bochner_x(&s, &k, &p, fd()).unwrap();
        let hr = h_r_x(&s, &k, &p, fd()).unwrap();
        assert!(hb.max_abs_diff(&val) < 1e-6, "{hb:?} {val:?}");
        assert!(hr.max_abs_diff(&val.scale(2.0)) < 1e-6);
        let g = XForm::Field(gradient_of_linear([0.4, 0.1, -0.9]));
        let val = single_slot(&s, &eval_form_points(&s, &g.as_cylinder(&s).unwrap(), std::slice::from_ref(&p)));
        assert!(bochner_x(&s, &g, &p, fd()).unwrap().max_abs_diff(&val) < 1e-6);
        assert!(h_r_x(&s, &g, &p, fd()).unwrap().max_abs_diff(&val.scale(2.0)) < 1e-6);
        // The gradient form is closed and the Killing form is co-closed.
        assert!(d_x(&s, &g, &p, fd()).unwrap().max_abs() < 1e-8);
        assert!(dstar_x(&s, &k, &p, fd()).unwrap().max_abs() < 1e-8);
        assert!(Backend::Analytic.check(&s).is_err());
    }

    #[test]
    fn sphere_weitzenbock_and_factorization() {
        let s = Space::sphere2();
        let pts = vec![s.project(&[0.3, -0.4, 0.6]), s.project(&[-0.5, 0.2, 0.1]), s.project(&[0.1, 0.9, -0.3])];
        let bump = TestFunction::gaussian(&[0.0, 0.0, 1.0], 0.9, 1.0);
        let w = CylinderForm::single(&s, CylinderFunction::linear(bump.clone()), killing([0.2, -0.5, 0.7])).unwrap();
        let w2 = CylinderForm::single(&s, CylinderFunction::constant(1.0), symmetrize(RawFormField { m: 1, terms: vec![ProductTerm { weight: 1.0, factors: vec![SlotFactor::linear(vec![0.0; 9], vec![1.0, 0.0, 0.0], bump.clone())] }] }).unwrap()).unwrap();
        for w in [&w, &w2] {
            assert!(weitzenbock_residual(&s, w, &pts, fd()).unwrap() < 1e-4);
            let r = factorization_residual(&s, LiftOp::Bochner, w, &pts[..2], &pts[2..], fd()).unwrap();
            assert!(r < 1e-4, "{r}");
        }
    }

    #[test]
    fn adjointness_on_x() {
        let s = Space::gaussian(2);
        let phi = XForm::Function(TestFunction::gaussian(&[0.3, -0.2], 0.8, 1.0));
        let eta = XForm::Field(field(TestFunction::gaussian_poly(&[-0.2, 0.4], 0.7, Polynomial::monomial(1.0, &[1, 0])), 1));
        let (a, b) = adjointness_x(&s, &phi, &eta, &Window::All, 1e-12, Backend::Analytic).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} {b}");
        assert!(a.abs() > 1e-3);
        let one = XForm::Field(field(TestFunction::gaussian(&[0.1, 0.1], 0.6, 1.0), 2));
        let two = XForm::Field(field(TestFunction::gaussian(&[-0.3, 0.2], 0.9, 1.0), 3));
        let (a, b) = adjointness_x(&s, &one, &two, &Window::All, 1e-12, Backend::Analytic).unwrap();
        assert!((a - b).abs() < 1e-10 && a.abs() > 1e-3);
    }

    #[test]
    fn report_serializes() {
        let r = OperatorReport::deterministic("x", 1.0, 1.0 + 1e-12, 1e-10);
        assert!(r.pass);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"identity\":\"x\"") && s.contains("\"relation\":\"eq\""));
        assert!(!OperatorReport::bound("b", 2.0, 1.0, 0.5).pass);
    }
}
