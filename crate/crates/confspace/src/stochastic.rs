//! Drifted Brownian motion, the independent particle process, parallel
//! translation with a potential, and Monte Carlo semigroup estimators.
//!
//! The diffusion coefficient is `√2`, so the generator of a single particle is
//! `Δ + β·∇ = -H_σ` and `T_0(t) = e^{-tH_σ}`. Frames follow `M' = J M`; the
//! estimator of `T^J_n(t) W(γ)` is `E[M^T W(ξ_γ(t))]`, whose generator is
//! `-(H^B - J)`. The de Rham choice therefore uses `J = -R_σ`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exterior::{BlockIndex, BlockOperator, Multivector, OperatorField, SlotOperator};
use crate::forms::{eval_form_points, CylinderForm, CylinderFunction, FormValue};
use crate::geometry::{Intensity, Manifold, Point, Space};
use crate::operators::{lift, weitz_correction, Backend, LiftOp, OperatorReport, Relation};
use crate::pointprocess::{m_subsets, run_mc, McEstimate, McPlan, McSummary, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdeScheme {
    EulerMaruyama,
    /// Euler step taken along the geodesic.
    GeodesicEm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    pub t: f64,
    pub dt: f64,
    pub scheme: SdeScheme,
    /// Average each sample with its sign-flipped noise twin.
    #[serde(default)]
    pub antithetic: bool,
}

impl SdeConfig {
    pub fn new(t: f64, dt: f64, scheme: SdeScheme) -> Result<Self> {
        let c = Self { t, dt, scheme, antithetic: false };
        c.validate()?;
        Ok(c)
    }

    pub fn antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return Err(Error::InvalidArgument("time horizon must be finite and nonnegative".into()));
        }
        if !(self.dt > 0.0) || (self.t > 0.0 && self.dt > self.t) {
            return Err(Error::InvalidArgument("need 0 < dt ≤ t".into()));
        }
        Ok(())
    }

    /// Number of steps; the step is shrunk so that they tile `[0, t]`.
    pub fn steps(&self) -> usize {
        if self.t == 0.0 {
            0
        } else {
            (self.t / self.dt - 1e-9).ceil() as usize
        }
    }

    pub fn step(&self) -> f64 {
        match self.steps() {
            0 => 0.0,
            k => self.t / k as f64,
        }
    }

    pub fn with_t(&self, t: f64) -> Self {
        Self { t, ..*self }
    }

    fn check_space(&self, space: &Space) -> Result<()> {
        self.validate()?;
        if self.scheme == SdeScheme::EulerMaruyama && !space.is_flat() {
            return Err(Error::InvalidArgument("euler-maruyama needs a flat space; use geodesic-em".into()));
        }
        Ok(())
    }
}

/// Per-degree potential fields `J_k(x)` acting on one slot.
#[derive(Clone)]
pub enum PotentialField {
    /// `J = 0`: plain parallel translation.
    Zero,
    /// `J = -R_σ`.
    DeRham,
    /// `J_k = c · Identity` on every degree.
    Constant(f64),
    /// A symmetric user field with per-degree upper bounds `bounds[k]` on its spectrum.
    Custom { field: Arc<dyn OperatorField>, bounds: Vec<f64> },
}

impl std::fmt::Debug for PotentialField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PotentialField::Zero => write!(f, "Zero"),
            PotentialField::DeRham => write!(f, "DeRham"),
            PotentialField::Constant(c) => write!(f, "Constant({c})"),
            PotentialField::Custom { bounds, .. } => write!(f, "Custom {{ bounds: {bounds:?} }}"),
        }
    }
}

/// `(J^T + J)/2` has its spectrum below this value; `J` is symmetric here.
fn top_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::NEG_INFINITY;
    }
    m.clone().symmetric_eigen().eigenvalues.max()
}

impl PotentialField {
    pub fn at(&self, space: &Space, p: &Point, k: usize) -> DMatrix<f64> {
        let n = SlotOperator::identity(space.dim(), k).matrix.nrows();
        match self {
            PotentialField::Zero => DMatrix::zeros(n, n),
            PotentialField::DeRham => -weitz_correction(space, p, k).matrix,
            PotentialField::Constant(c) => DMatrix::identity(n, n) * *c,
            PotentialField::Custom { field, .. } => field.at(space, p, k).matrix,
        }
    }

    /// The field when it does not depend on the point (in any frame).
    fn constant_matrix(&self, space: &Space, k: usize) -> Option<DMatrix<f64>> {
        match self {
            PotentialField::Zero | PotentialField::Constant(_) => Some(self.at(space, &reference_point(space), k)),
            PotentialField::DeRham => match (space.manifold(), space.intensity()) {
                (Manifold::Euclidean(_), Intensity::Gaussian { .. } | Intensity::Uniform) | (Manifold::Sphere2, Intensity::Uniform) => {
                    Some(self.at(space, &reference_point(space), k))
                }
                _ => None,
            },
            PotentialField::Custom { .. } => None,
        }
    }

    /// Upper bound of the spectrum of `J_k` over the space.
    pub fn degree_bound(&self, space: &Space, k: usize) -> Result<f64> {
        match self {
            PotentialField::Custom { bounds, .. } => {
                bounds.get(k).copied().ok_or_else(|| Error::InvalidArgument(format!("no bound for degree {k}")))
            }
            _ => match self.constant_matrix(space, k) {
                Some(m) => Ok(top_eigenvalue(&m)),
                None => Err(Error::Unsupported("spectral bound of a point-dependent field".into())),
            },
        }
    }

    /// `C = max_m sup spec J_{n,m}`.
    pub fn spectral_bound(&self, space: &Space, n: usize) -> Result<f64> {
        let d = space.dim();
        if n == 0 {
            return Ok(0.0);
        }
        let per: Vec<f64> = (0..=d).map(|k| if k == 0 { Ok(0.0) } else { self.degree_bound(space, k) }).collect::<Result<_>>()?;
        let mut best = f64::NEG_INFINITY;
        for m in 1..=n {
            for b in BlockIndex::enumerate(n, m, d) {
                best = best.max(b.degrees.iter().map(|&k| per[k]).sum());
            }
        }
        Ok(best)
    }
}

fn reference_point(space: &Space) -> Point {
    match space.manifold() {
        Manifold::Euclidean(d) => Point::new(&vec![0.0; d]),
        Manifold::Sphere2 => Point::new(&[0.0, 0.0, 1.0]),
    }
}

fn expm_symmetric(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = a.clone().symmetric_eigen();
    let mut d = e.eigenvectors.clone();
    for (j, l) in e.eigenvalues.iter().enumerate() {
        let s = l.exp();
        for i in 0..d.nrows() {
            d[(i, j)] *= s;
        }
    }
    d * e.eigenvectors.transpose()
}

/// One particle's state: position and per-degree frame matrices `M^{(k)}`.
#[derive(Clone, Debug)]
struct Particle {
    x: Point,
    frames: Vec<DMatrix<f64>>,
}

struct Stepper<'a> {
    space: &'a Space,
    cfg: SdeConfig,
    potential: Option<&'a PotentialField>,
    /// Highest slot degree that needs a frame.
    degrees: usize,
    /// `exp(J_k dt)` when `J_k` is constant.
    constant: Vec<Option<DMatrix<f64>>>,
}

impl<'a> Stepper<'a> {
    fn new(space: &'a Space, cfg: SdeConfig, potential: Option<&'a PotentialField>, degrees: usize) -> Self {
        let dt = cfg.step();
        let constant = (0..=degrees)
            .map(|k| match potential {
                None => None,
                Some(p) => p.constant_matrix(space, k).map(|j| expm_symmetric(&(j * dt))),
            })
            .collect();
        Self { space, cfg, potential, degrees, constant }
    }

    fn start(&self, x: &Point) -> Particle {
        let d = self.space.dim();
        let frames = (0..=self.degrees).map(|k| { let n = SlotOperator::identity(d, k).matrix.nrows(); DMatrix::identity(n, n) }).collect();
        Particle { x: x.clone(), frames }
    }

    fn noise(&self, rng: &mut RngStream, sign: f64) -> Vec<f64> {
        (0..self.space.dim()).map(|_| sign * rng.normal()).collect()
    }

    fn step(&self, p: &mut Particle, rng: &mut RngStream, sign: f64, index: usize) -> Result<()> {
        let dt = self.cfg.step();
        let beta = self.space.beta(&p.x);
        let z = self.noise(rng, sign);
        let v: Vec<f64> = (0..z.len()).map(|a| beta.components[a] * dt + (2.0 * dt).sqrt() * z[a]).collect();
        let next = self.space.exp_map(&p.x, &v, 1.0).map_err(|_| Error::BlowUp { step: index })?;
        if next.coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::BlowUp { step: index });
        }
        if self.degrees > 0 {
            let flat = self.space.is_flat();
            let tau = if flat { None } else { Some(self.space.transport_matrix(&p.x, &next)?) };
            for k in 1..=self.degrees {
                let n = p.frames[k].nrows();
                let tk = match &tau {
                    Some(t) => SlotOperator::exterior_power(t, k).matrix,
                    None => DMatrix::identity(n, n),
                };
                let moved = match (&self.constant[k], self.potential) {
                    (Some(e), _) if flat => e * &p.frames[k],
                    (Some(e), _) => e * tk * &p.frames[k],
                    (None, Some(pot)) => {
                        let j0 = pot.at(self.space, &p.x, k);
                        let j1 = pot.at(self.space, &next, k);
                        let avg = (&tk * j0 * tk.transpose() + j1) * (dt / 2.0);
                        expm_symmetric(&avg) * tk * &p.frames[k]
                    }
                    (None, None) => tk * &p.frames[k],
                };
                p.frames[k] = moved;
            }
        }
        p.x = next;
        Ok(())
    }

    fn run(&self, x: &Point, rng: &mut RngStream, sign: f64, mut record: Option<&mut Vec<Point>>) -> Result<Particle> {
        let mut p = self.start(x);
        if let Some(r) = record.as_deref_mut() {
            r.push(p.x.clone());
        }
        for i in 0..self.cfg.steps() {
            self.step(&mut p, rng, sign, i)?;
            if let Some(r) = record.as_deref_mut() {
                r.push(p.x.clone());
            }
        }
        Ok(p)
    }
}

/// Euler path of `dξ = β dt + √2 dW` started at `x`, including the start.
pub fn simulate_sde(space: &Space, x: &Point, cfg: &SdeConfig, rng: &mut RngStream) -> Result<Vec<Point>> {
    cfg.check_space(space)?;
    let mut path = Vec::with_capacity(cfg.steps() + 1);
    Stepper::new(space, *cfg, None, 0).run(x, rng, 1.0, Some(&mut path))?;
    Ok(path)
}

/// Paths of independent particles started at the points of `γ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticlePath {
    pub initial: Vec<Point>,
    pub paths: Vec<Vec<Point>>,
    pub dt: f64,
}

impl ParticlePath {
    pub fn at_end(&self) -> Vec<Point> {
        self.paths.iter().map(|p| p.last().cloned().expect("paths include the start")).collect()
    }
}

/// Each particle uses the sub-stream `rng.child(i)`.
pub fn simulate_particles(space: &Space, gamma: &[Point], cfg: &SdeConfig, rng: &RngStream) -> Result<ParticlePath> {
    let paths = gamma
        .iter()
        .enumerate()
        .map(|(i, x)| simulate_sde(space, x, cfg, &mut rng.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParticlePath { initial: gamma.to_vec(), paths, dt: cfg.step() })
}

/// `P^J` on `𝕋^(n)` over a set of particles: the tensor product of the per-slot frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    pub t: f64,
    pub dim: usize,
    pub n: usize,
    /// `slots[i][k]` acts on degree `k` of slot `i`.
    pub slots: Vec<Vec<DMatrix<f64>>>,
}

impl FrameMatrix {
    fn ops(&self, i: usize, transpose: bool) -> Vec<SlotOperator> {
        self.slots[i]
            .iter()
            .enumerate()
            .map(|(k, m)| SlotOperator::from_matrix(self.dim, k, if transpose { m.transpose() } else { m.clone() }).expect("frame size"))
            .collect()
    }

    fn apply_all(&self, u: &Multivector, transpose: bool) -> Multivector {
        let mut out = u.clone();
        for i in 0..self.slots.len() {
            let ops = self.ops(i, transpose);
            let refs: Vec<Option<&SlotOperator>> = ops.iter().map(Some).collect();
            out = out.apply_slot(i, &refs);
        }
        out
    }

    /// `P u` for `u` in the fiber at the start.
    pub fn push(&self, u: &Multivector) -> Multivector {
        self.apply_all(u, false)
    }

    /// `P^* v` for `v` in the fiber at the end.
    pub fn pull_back(&self, v: &Multivector) -> Multivector {
        self.apply_all(v, true)
    }

    /// Dense matrix on the block basis of `𝕋^(n)` over these slots.
    pub fn matrix(&self) -> (Vec<u64>, DMatrix<f64>) {
        let basis = BlockOperator::basis(self.dim, self.slots.len(), self.n);
        let mut mat = DMatrix::zeros(basis.len(), basis.len());
        for (c, key) in basis.iter().enumerate() {
            let img = self.push(&Multivector::blade(self.dim, self.slots.len(), *key, 1.0));
            for (k, v) in img.terms() {
                let r = basis.binary_search(&k).expect("block preserving");
                mat[(r, c)] = v;
            }
        }
        (basis, mat)
    }

    pub fn spectral_norm(&self) -> f64 {
        let (_, m) = self.matrix();
        if m.is_empty() {
            return 0.0;
        }
        m.singular_values().max()
    }
}

/// Frames of every particle along simulated paths, plus the end points.
pub fn parallel_translate(
    space: &Space,
    gamma: &[Point],
    cfg: &SdeConfig,
    potential: &PotentialField,
    n: usize,
    rng: &RngStream,
) -> Result<(Vec<Point>, FrameMatrix)> {
    cfg.check_space(space)?;
    let degrees = n.min(space.dim());
    let st = Stepper::new(space, *cfg, Some(potential), degrees);
    let mut ends = Vec::new();
    let mut slots = Vec::new();
    for (i, x) in gamma.iter().enumerate() {
        let p = st.run(x, &mut rng.child(i as u64), 1.0, None)?;
        ends.push(p.x);
        slots.push(p.frames);
    }
    Ok((ends, FrameMatrix { t: cfg.t, dim: space.dim(), n, slots }))
}

/// Output coordinates `(subset, blade)` of `T^J_n W(γ)`.
fn output_coords(space: &Space, w: &CylinderForm, npts: usize) -> Vec<(Vec<usize>, u64)> {
    let mut ms: Vec<usize> = w.terms.iter().map(|t| t.m()).collect();
    ms.sort_unstable();
    ms.dedup();
    let mut out = Vec::new();
    for m in ms {
        let basis = BlockOperator::basis(space.dim(), m, w.n);
        for sub in m_subsets(npts, m) {
            for k in &basis {
                out.push((sub.clone(), *k));
            }
        }
    }
    out
}

/// `M^T W(ξ_γ(t))` for one noise realization.
fn pulled_back_sample(
    space: &Space,
    w: &CylinderForm,
    gamma: &[Point],
    st: &Stepper,
    rng: &RngStream,
    sign: f64,
) -> Result<FormValue> {
    let mut ends = Vec::with_capacity(gamma.len());
    let mut frames = Vec::with_capacity(gamma.len());
    for (i, x) in gamma.iter().enumerate() {
        let p = st.run(x, &mut rng.child(i as u64), sign, None)?;
        ends.push(p.x);
        frames.push(p.frames);
    }
    let val = eval_form_points(space, w, &ends);
    let mut out = FormValue::zero(val.dim, val.degree);
    for (sub, mv) in &val.comps {
        let fm = FrameMatrix { t: st.cfg.t, dim: space.dim(), n: w.n, slots: sub.iter().map(|&i| frames[i].clone()).collect() };
        out.add_comp(sub.clone(), &fm.pull_back(mv));
    }
    Ok(out)
}

/// Per-component MC estimate of a form-valued expectation.
#[derive(Clone, Debug)]
pub struct FormEstimate {
    pub dim: usize,
    pub degree: usize,
    pub coords: Vec<(Vec<usize>, u64)>,
    /// Shared with every horizon of the same run; this one starts at `offset`.
    pub summary: McSummary,
    pub offset: usize,
}

impl FormEstimate {
    pub fn mean(&self) -> FormValue {
        let mut out = FormValue::zero(self.dim, self.degree);
        for (i, (sub, key)) in self.coords.iter().enumerate() {
            let mut mv = Multivector::zero(self.dim, sub.len());
            mv.add_term(*key, self.estimate(i).mean);
            out.add_comp(sub.clone(), &mv);
        }
        out
    }

    pub fn estimate(&self, i: usize) -> McEstimate {
        self.summary.estimate(self.offset + i)
    }

    pub fn index_of(&self, sub: &[usize], key: u64) -> Option<usize> {
        self.coords.iter().position(|(s, k)| s == sub && *k == key)
    }
}

fn flatten(coords: &[(Vec<usize>, u64)], v: &FormValue, out: &mut [f64]) -> Result<()> {
    for (sub, mv) in &v.comps {
        for (k, c) in mv.terms() {
            let i = coords.iter().position(|(s, key)| s == sub && *key == k).ok_or_else(|| Error::InvalidArgument("value outside the block basis".into()))?;
            out[i] += c;
        }
    }
    Ok(())
}

/// `T^J_n(t) W(γ) = E[(P^J)^* W(ξ_γ(t))]` per component; several horizons share paths.
pub fn semigroup_tn_multi(
    space: &Space,
    w: &CylinderForm,
    gamma: &[Point],
    cfgs: &[SdeConfig],
    potential: &PotentialField,
    plan: &McPlan,
) -> Result<Vec<FormEstimate>> {
    for c in cfgs {
        c.check_space(space)?;
    }
    let coords = output_coords(space, w, gamma.len());
    let width = coords.len();
    let degrees = w.n.min(space.dim());
    let steppers: Vec<Stepper> = cfgs.iter().map(|c| Stepper::new(space, *c, Some(potential), degrees)).collect();
    let summary = run_mc(plan, width * cfgs.len(), |rng, out| {
        for (j, st) in steppers.iter().enumerate() {
            let slot = &mut out[j * width..(j + 1) * width];
            let base = rng.child(j as u64);
            let v = pulled_back_sample(space, w, gamma, st, &base, 1.0)?;
            if st.cfg.antithetic {
                let u = pulled_back_sample(space, w, gamma, st, &base, -1.0)?;
                let mut avg = v.scale(0.5);
                avg.add_scaled(&u, 0.5);
                flatten(&coords, &avg, slot)?;
            } else {
                flatten(&coords, &v, slot)?;
            }
        }
        Ok(())
    })?;
    Ok((0..cfgs.len())
        .map(|j| FormEstimate { dim: space.dim(), degree: w.n, coords: coords.clone(), summary: summary.clone(), offset: j * width })
        .collect())
}

pub fn semigroup_tn(space: &Space, w: &CylinderForm, gamma: &[Point], cfg: &SdeConfig, potential: &PotentialField, plan: &McPlan) -> Result<FormEstimate> {
    Ok(semigroup_tn_multi(space, w, gamma, &[*cfg], potential, plan)?.remove(0))
}

/// `T_0(t) F(γ) = E F(ξ_γ(t))`.
pub fn semigroup_t0(space: &Space, f: &CylinderFunction, gamma: &[Point], cfg: &SdeConfig, plan: &McPlan) -> Result<McEstimate> {
    let est = semigroup_tn(space, &CylinderForm::function(f.clone()), gamma, cfg, &PotentialField::Zero, plan)?;
    Ok(est.estimate(0))
}

/// Horizons used by the generator check, largest first.
pub const GENERATOR_TIMES: [f64; 3] = [0.02, 0.01, 0.005];

/// Which lifted operator the potential should reproduce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JChoice {
    /// `J = 0` and `H^B` (or `H_πσ` on functions).
    Bochner,
    /// `J = -R_σ` and `H^R`.
    DeRham,
}

impl JChoice {
    pub fn potential(&self) -> PotentialField {
        match self {
            JChoice::Bochner => PotentialField::Zero,
            JChoice::DeRham => PotentialField::DeRham,
        }
    }

    fn op(&self, n: usize) -> LiftOp {
        match (self, n) {
            (JChoice::Bochner, 0) => LiftOp::Dirichlet,
            (JChoice::Bochner, _) => LiftOp::Bochner,
            (JChoice::DeRham, _) => LiftOp::DeRham,
        }
    }
}

/// Slopes `(W - T(t)W)/t` at the three horizons, extrapolated as
/// `2 s(t/2) - s(t)` on the two finest pairs, against `lift(H, W, γ)`.
///
/// Each horizon steps with `dt = t / steps_per_horizon`. Pass when every
/// component of the finest extrapolation is within `max(3·stderr, 5e-3)`.
pub fn generator_check(
    space: &Space,
    w: &CylinderForm,
    gamma: &[Point],
    choice: JChoice,
    steps_per_horizon: usize,
    plan: &McPlan,
) -> Result<OperatorReport> {
    let scheme = if space.is_flat() { SdeScheme::EulerMaruyama } else { SdeScheme::GeodesicEm };
    let cfgs: Vec<SdeConfig> = GENERATOR_TIMES
        .iter()
        .map(|t| SdeConfig::new(*t, t / steps_per_horizon as f64, scheme).map(|c| c.antithetic(true)))
        .collect::<Result<_>>()?;
    let ests = semigroup_tn_multi(space, w, gamma, &cfgs, &choice.potential(), plan)?;
    let target = lift(space, choice.op(w.n), w, gamma, Backend::auto(space))?;
    let w0 = eval_form_points(space, w, gamma);
    let coords = &ests[0].coords;
    let width = coords.len();
    // Joint coefficients over the three slices: R = 2 s(t2) - s(t1), s(t) = (W - T)/t.
    let (t1, t2) = (GENERATOR_TIMES[1], GENERATOR_TIMES[2]);
    let mut worst = (f64::NEG_INFINITY, 0.0, 0.0, 0.0, 0.0);
    let mut pass = true;
    for (i, (sub, key)) in coords.iter().enumerate() {
        let w_i = w0.comp(sub).map_or(0.0, |m| m.coeff(*key));
        let h_i = target.comp(sub).map_or(0.0, |m| m.coeff(*key));
        let mut c = vec![0.0; 3 * width];
        c[width + i] = 1.0 / t1;
        c[2 * width + i] = -2.0 / t2;
        let joint = ests[0].summary.combo(&c);
        let slope = joint.mean + w_i * (2.0 / t2 - 1.0 / t1);
        let tol = (3.0 * joint.stderr).max(5e-3);
        let err = (slope - h_i).abs();
        pass &= err <= tol;
        if err / tol > worst.0 {
            worst = (err / tol, slope, h_i, joint.stderr, tol);
        }
    }
    let (_, lhs, rhs, se, tol) = worst;
    let name = match choice {
        JChoice::Bochner => "generator (bochner)",
        JChoice::DeRham => "generator (de rham)",
    };
    Ok(OperatorReport { identity: name.into(), lhs, rhs, stderr: Some(se), tol, pass, seed: Some(plan.seed), relation: Relation::Eq })
}

/// `‖T^J_n W(γ)‖ ≤ e^{tC} T_0(t)‖W(γ)‖` as an MC inequality.
pub fn domination_check(
    space: &Space,
    w: &CylinderForm,
    gamma: &[Point],
    cfg: &SdeConfig,
    potential: &PotentialField,
    plan: &McPlan,
) -> Result<OperatorReport> {
    cfg.check_space(space)?;
    let c = potential.spectral_bound(space, w.n)?;
    let coords = output_coords(space, w, gamma.len());
    let width = coords.len();
    let st = Stepper::new(space, *cfg, Some(potential), w.n.min(space.dim()));
    let summary = run_mc(plan, width + 1, |rng, out| {
        let v = pulled_back_sample(space, w, gamma, &st, rng, 1.0)?;
        flatten(&coords, &v, &mut out[..width])?;
        // Unpulled norm at the end points, i.e. T_0(t)‖W‖ along the same path.
        let mut ends = Vec::new();
        for (i, x) in gamma.iter().enumerate() {
            ends.push(Stepper::new(space, *cfg, None, 0).run(x, &mut rng.child(i as u64), 1.0, None)?.x);
        }
        let raw = eval_form_points(space, w, &ends);
        out[width] = raw.inner(&raw).sqrt();
        Ok(())
    })?;
    let mean: Vec<f64> = (0..width).map(|i| summary.estimate(i).mean).collect();
    let se_lhs = (0..width).map(|i| summary.estimate(i).stderr.powi(2)).sum::<f64>().sqrt();
    let lhs = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let factor = (cfg.t * c).exp();
    let norm = summary.estimate(width);
    let rhs = factor * norm.mean;
    let tol = 3.0 * (se_lhs + factor * norm.stderr);
    Ok(OperatorReport::bound("domination", lhs, rhs, tol).with_seed(plan.seed))
}

/// Largest ratio `‖P^J(t)‖ / (e^{tC}(1 + 5 dt))` over sampled paths and subsets.
pub fn frame_bound_check(
    space: &Space,
    gamma: &[Point],
    cfg: &SdeConfig,
    potential: &PotentialField,
    n: usize,
    paths: usize,
    seed: u64,
) -> Result<OperatorReport> {
    let c = potential.spectral_bound(space, n)?;
    let bound = (cfg.t * c).exp() * (1.0 + 5.0 * cfg.step());
    let mut worst: f64 = 0.0;
    for i in 0..paths {
        let rng = RngStream::for_sample(seed, 0x0b0d, i as u32);
        let (_, fm) = parallel_translate(space, gamma, cfg, potential, n, &rng)?;
        for m in 1..=n.min(gamma.len()) {
            for sub in m_subsets(gamma.len(), m) {
                let part = FrameMatrix { t: fm.t, dim: fm.dim, n, slots: sub.iter().map(|&j| fm.slots[j].clone()).collect() };
                worst = worst.max(part.spectral_norm());
            }
        }
    }
    Ok(OperatorReport::bound("frame norm bound", worst, bound, 0.0).with_seed(seed))
}

/// `T_0(t+s)F ≈ T_0(t)T_0(s)F`, the inner expectation with one fresh path per outer sample.
pub fn semigroup_property_check(
    space: &Space,
    f: &CylinderFunction,
    gamma: &[Point],
    t: f64,
    s: f64,
    cfg: &SdeConfig,
    plan: &McPlan,
) -> Result<OperatorReport> {
    let whole = cfg.with_t(t + s);
    let first = cfg.with_t(s);
    let second = cfg.with_t(t);
    for c in [&whole, &first, &second] {
        c.check_space(space)?;
    }
    let run = |c: &SdeConfig, start: &[Point], rng: &RngStream| -> Result<Vec<Point>> {
        let st = Stepper::new(space, *c, None, 0);
        start.iter().enumerate().map(|(i, x)| Ok(st.run(x, &mut rng.child(i as u64), 1.0, None)?.x)).collect()
    };
    let summary = run_mc(plan, 2, |rng, out| {
        out[0] = f.eval_points(&run(&whole, gamma, &rng.child(0))?);
        let mid = run(&first, gamma, &rng.child(1))?;
        out[1] = f.eval_points(&run(&second, &mid, &rng.child(2))?);
        Ok(())
    })?;
    // Independent streams on each side: the difference has the combined error.
    let (a, b) = (summary.estimate(0), summary.estimate(1));
    let diff = summary.diff(0, 1);
    Ok(OperatorReport::monte_carlo("semigroup property", &a, &b, &diff, 3.0))
}

/// Joint estimate of a product-term component against the product of
/// separately estimated `T_0 F` and `T^J_{n,m} ω`.
pub fn factorization_sem_check(
    space: &Space,
    w: &CylinderForm,
    gamma: &[Point],
    xbar: &[usize],
    key: u64,
    cfg: &SdeConfig,
    potential: &PotentialField,
    plan: &McPlan,
) -> Result<OperatorReport> {
    if w.terms.len() != 1 || w.terms[0].m() != xbar.len() {
        return Err(Error::InvalidArgument("needs a single product term matching the subset size".into()));
    }
    let term = &w.terms[0];
    let joint = semigroup_tn(space, w, gamma, cfg, potential, plan)?;
    let i = joint.index_of(xbar, key).ok_or_else(|| Error::InvalidArgument("component not in the block basis".into()))?;
    let lhs = joint.estimate(i);
    let rest: Vec<Point> = (0..gamma.len()).filter(|j| !xbar.contains(j)).map(|j| gamma[j].clone()).collect();
    let pts: Vec<Point> = xbar.iter().map(|&j| gamma[j].clone()).collect();
    let other = McPlan::new(plan.seed, plan.task.wrapping_add(1), plan.samples);
    let f_est = semigroup_t0(space, &term.f, &rest, cfg, &other)?;
    let third = McPlan::new(plan.seed, plan.task.wrapping_add(2), plan.samples);
    let om = CylinderForm::single(space, CylinderFunction::constant(1.0), term.omega.clone())?;
    let om_est = semigroup_tn(space, &om, &pts, cfg, potential, &third)?;
    let full: Vec<usize> = (0..pts.len()).collect();
    let j = om_est.index_of(&full, key).ok_or_else(|| Error::InvalidArgument("component not in the block basis".into()))?;
    let o = om_est.estimate(j);
    let rhs_mean = f_est.mean * o.mean;
    let rhs_se = ((f_est.stderr * o.mean).powi(2) + (f_est.mean * o.stderr).powi(2)).sqrt();
    let se = (lhs.stderr.powi(2) + rhs_se.powi(2)).sqrt();
    let rhs = McEstimate { mean: rhs_mean, stderr: rhs_se, ..lhs };
    let diff = McEstimate { mean: lhs.mean - rhs_mean, stderr: se, ..lhs };
    Ok(OperatorReport::monte_carlo("semigroup factorization", &lhs, &rhs, &diff, 3.0))
}
