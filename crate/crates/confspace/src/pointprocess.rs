//! Poisson configurations, deterministic Monte Carlo, and the series and
//! Mecke verifiers.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forms::{CylinderFunction, Outer, TestFunction};
use crate::geometry::{Intensity, Manifold, Point, Space, Window};
use crate::scalar::Smooth;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded ChaCha8 stream; equal `(seed, stream)` give equal draws.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Stream for sample `index` of task `task`.
    pub fn for_sample(seed: u64, task: u32, index: u32) -> Self {
        Self::new(seed, ((task as u64) << 32) | index as u64)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Independent sub-stream, deterministic in `(seed, stream, k)`.
    pub fn child(&self, k: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(self.stream ^ splitmix64(k.wrapping_add(1)))), self.stream)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// A finite configuration inside a window.
#[derive(Clone, Debug, PartialEq)]
pub struct Configuration {
    pub points: Vec<Point>,
    pub window: Window,
}

impl Configuration {
    pub fn new(points: Vec<Point>, window: Window) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !window.contains(&p.coords) {
                return Err(Error::InvalidArgument("point outside the window".into()));
            }
            if points[..i].contains(p) {
                return Err(Error::InvalidArgument("repeated point".into()));
            }
        }
        Ok(Self { points, window })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Unordered `m`-subsets as sorted index lists.
    pub fn subsets(&self, m: usize) -> Combinations {
        m_subsets(self.points.len(), m)
    }
}

/// Iterator over the `m`-subsets of `0..n` in lexicographic order.
#[derive(Clone, Debug)]
pub struct Combinations {
    n: usize,
    idx: Vec<usize>,
    done: bool,
}

pub fn m_subsets(n: usize, m: usize) -> Combinations {
    Combinations { n, idx: (0..m).collect(), done: m > n }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.clone();
        let m = self.idx.len();
        let mut i = m;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.idx[i] < self.n - m + i {
                self.idx[i] += 1;
                for j in i + 1..m {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

#[derive(Clone, Debug)]
enum Proposal {
    Empty,
    /// Exact normal draws for the Gaussian intensity on all of `ℝ^d`.
    Normal { scale: f64, d: usize },
    /// Box-uniform proposal with rejection against `ρ / ρ_max`.
    Box { lo: Vec<f64>, hi: Vec<f64>, rho_max: f64 },
    /// Uniform on the sphere with rejection.
    Sphere { rho_max: f64 },
}

/// Poisson sampler for a fixed space and window.
#[derive(Clone, Debug)]
pub struct Sampler {
    space: Space,
    window: Window,
    mass: f64,
    proposal: Proposal,
}

impl Sampler {
    pub fn new(space: &Space, window: &Window) -> Result<Self> {
        let mass = match (space.manifold(), space.intensity(), window) {
            (Manifold::Euclidean(d), Intensity::Gaussian { scale }, Window::All) => (2.0 * PI * scale * scale).powf(d as f64 / 2.0),
            _ => space.sigma_mass(window)?,
        };
        if !mass.is_finite() {
            return Err(Error::Divergence);
        }
        let proposal = if mass == 0.0 {
            Proposal::Empty
        } else {
            match (space.manifold(), space.intensity(), window) {
                (Manifold::Euclidean(d), Intensity::Gaussian { scale }, Window::All) => Proposal::Normal { scale: *scale, d },
                (Manifold::Euclidean(_), Intensity::Custom(c), Window::All) => {
                    let (lo, hi) = c.effective_box().ok_or(Error::Divergence)?;
                    let rho_max = c.rho_max(&lo, &hi);
                    Proposal::Box { lo, hi, rho_max }
                }
                (Manifold::Euclidean(_), _, Window::Box { lo, hi }) => {
                    Proposal::Box { lo: lo.clone(), hi: hi.clone(), rho_max: space.rho_max_on_box(lo, hi) }
                }
                (Manifold::Sphere2, Intensity::Custom(c), _) => Proposal::Sphere { rho_max: c.rho_max(&[-1.0; 3], &[1.0; 3]) },
                (Manifold::Sphere2, _, _) => Proposal::Sphere { rho_max: 1.0 },
                _ => return Err(Error::Divergence),
            }
        };
        Ok(Self { space: space.clone(), window: window.clone(), mass, proposal })
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    /// One point with density `ρ / σ(Λ)`.
    pub fn draw_point(&self, rng: &mut RngStream) -> Point {
        loop {
            let (x, rho_max): (Vec<f64>, f64) = match &self.proposal {
                Proposal::Empty => panic!("draw from an empty window"),
                Proposal::Normal { scale, d } => return Point::new(&(0..*d).map(|_| scale * rng.normal()).collect::<Vec<_>>()),
                Proposal::Box { lo, hi, rho_max } => {
                    (lo.iter().zip(hi).map(|(a, b)| a + (b - a) * rng.uniform()).collect(), *rho_max)
                }
                Proposal::Sphere { rho_max } => {
                    let v: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                    let r = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                    if r == 0.0 {
                        continue;
                    }
                    (v.iter().map(|c| c / r).collect(), *rho_max)
                }
            };
            if rho_max == 1.0 && matches!(self.space.intensity(), Intensity::Uniform) {
                return Point::new(&x);
            }
            if rng.uniform() * rho_max <= self.space.rho(&x) {
                return Point::new(&x);
            }
        }
    }

    /// `k` distinct points drawn i.i.d. from `ρ / σ(Λ)`.
    pub fn draw_points(&self, k: usize, rng: &mut RngStream) -> Vec<Point> {
        let mut pts: Vec<Point> = Vec::with_capacity(k);
        while pts.len() < k {
            let p = self.draw_point(rng);
            if !pts.contains(&p) {
                pts.push(p);
            }
        }
        pts
    }

    pub fn sample(&self, rng: &mut RngStream) -> Configuration {
        let n = if self.mass == 0.0 { 0 } else { Poisson::new(self.mass).expect("positive mass").sample(rng) as usize };
        Configuration { points: self.draw_points(n, rng), window: self.window.clone() }
    }
}

/// Draw a Poisson configuration on the window.
pub fn sample(space: &Space, window: &Window, rng: &mut RngStream) -> Result<Configuration> {
    Ok(Sampler::new(space, window)?.sample(rng))
}

/// Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub seed: u64,
    pub stream: u64,
}

impl McEstimate {
    /// `|mean - target| ≤ k · stderr`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }
}

/// Running mean and co-moment matrix of a vector-valued sample.
#[derive(Clone, Debug)]
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(k: usize) -> Self {
        Self { n: 0, mean: vec![0.0; k], m2: vec![0.0; k * k] }
    }

    fn push(&mut self, x: &[f64]) {
        let k = self.mean.len();
        self.n += 1;
        let n = self.n as f64;
        let delta: Vec<f64> = (0..k).map(|i| x[i] - self.mean[i]).collect();
        for i in 0..k {
            self.mean[i] += delta[i] / n;
        }
        for i in 0..k {
            for j in 0..k {
                self.m2[i * k + j] += delta[i] * (x[j] - self.mean[j]);
            }
        }
    }

    fn merge(&mut self, o: &Moments) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = o.clone();
            return;
        }
        let k = self.mean.len();
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        let delta: Vec<f64> = (0..k).map(|i| o.mean[i] - self.mean[i]).collect();
        for i in 0..k {
            for j in 0..k {
                self.m2[i * k + j] += o.m2[i * k + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for i in 0..k {
            self.mean[i] += delta[i] * nb / n;
        }
        self.n += o.n;
    }
}

/// Seed, task id and sample count of a Monte Carlo run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McPlan {
    pub seed: u64,
    pub task: u32,
    pub samples: usize,
}

impl McPlan {
    pub fn new(seed: u64, task: u32, samples: usize) -> Self {
        Self { seed, task, samples }
    }
}

/// Result of a vector-valued run; any linear combination can be read off.
#[derive(Clone, Debug)]
pub struct McSummary {
    plan: McPlan,
    moments: Moments,
}

impl McSummary {
    pub fn n(&self) -> usize {
        self.moments.n
    }

    pub fn width(&self) -> usize {
        self.moments.mean.len()
    }

    /// Estimate of `Σ c_i X_i`.
    pub fn combo(&self, c: &[f64]) -> McEstimate {
        let k = self.width();
        let mean: f64 = (0..k).map(|i| c[i] * self.moments.mean[i]).sum();
        let mut var = 0.0;
        for i in 0..k {
            for j in 0..k {
                var += c[i] * c[j] * self.moments.m2[i * k + j];
            }
        }
        let n = self.moments.n;
        let var = if n > 1 { (var / (n - 1) as f64).max(0.0) } else { f64::INFINITY };
        McEstimate { mean, stderr: (var / n as f64).sqrt(), n, seed: self.plan.seed, stream: (self.plan.task as u64) << 32 }
    }

    pub fn estimate(&self, i: usize) -> McEstimate {
        let mut c = vec![0.0; self.width()];
        c[i] = 1.0;
        self.combo(&c)
    }

    /// Estimate of `X_i - X_j` with the paired standard error.
    pub fn diff(&self, i: usize, j: usize) -> McEstimate {
        let mut c = vec![0.0; self.width()];
        c[i] += 1.0;
        c[j] -= 1.0;
        self.combo(&c)
    }
}

/// Chunk size of the parallel engine; merge order never depends on threads.
pub const MC_CHUNK: usize = 4096;

/// Run `f` once per sample with its own stream and accumulate `width` outputs.
pub fn run_mc<F>(plan: &McPlan, width: usize, f: F) -> Result<McSummary>
where
    F: Fn(&mut RngStream, &mut [f64]) -> Result<()> + Sync,
{
    if plan.samples < 2 {
        return Err(Error::InvalidArgument("at least two samples needed".into()));
    }
    if plan.samples > u32::MAX as usize {
        return Err(Error::InvalidArgument("too many samples for one task".into()));
    }
    let chunks: Vec<usize> = (0..plan.samples.div_ceil(MC_CHUNK)).collect();
    let parts: Vec<Result<Moments>> = chunks
        .par_iter()
        .map(|&c| {
            let mut mom = Moments::new(width);
            let mut buf = vec![0.0; width];
            for i in c * MC_CHUNK..((c + 1) * MC_CHUNK).min(plan.samples) {
                let mut rng = RngStream::for_sample(plan.seed, plan.task, i as u32);
                buf.iter_mut().for_each(|v| *v = 0.0);
                f(&mut rng, &mut buf)?;
                mom.push(&buf);
            }
            Ok(mom)
        })
        .collect();
    let mut total = Moments::new(width);
    for p in parts {
        total.merge(&p?);
    }
    Ok(McSummary { plan: *plan, moments: total })
}

/// Scalar convenience wrapper around [`run_mc`].
pub fn mc_mean<F>(plan: &McPlan, f: F) -> Result<McEstimate>
where
    F: Fn(&mut RngStream) -> Result<f64> + Sync,
{
    Ok(run_mc(plan, 1, |rng, out| {
        out[0] = f(rng)?;
        Ok(())
    })?
    .estimate(0))
}

/// χ² goodness of fit of observed counts against `Poisson(λ)`; returns the
/// p-value. Tail classes are pooled so every expected count is at least 5.
pub fn poisson_gof(counts: &[usize], lambda: f64) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, DiscreteCDF, Poisson as P};
    let total: usize = counts.len();
    let pois = P::new(lambda).expect("positive rate");
    let max = *counts.iter().max().unwrap_or(&0);
    let mut obs = vec![0usize; max + 1];
    for &c in counts {
        obs[c] += 1;
    }
    let mut classes: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    let mut k = 0u64;
    loop {
        o += *obs.get(k as usize).unwrap_or(&0) as f64;
        e += pois.pmf(k) * total as f64;
        let rest = (1.0 - pois.cdf(k)) * total as f64;
        if e >= 5.0 && rest >= 5.0 {
            classes.push((o, e));
            o = 0.0;
            e = 0.0;
        } else if rest < 5.0 {
            let rest_obs: usize = obs.iter().skip(k as usize + 1).sum();
            classes.push((o + rest_obs as f64, e + rest));
            break;
        }
        k += 1;
    }
    let stat: f64 = classes.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = classes.len().saturating_sub(1).max(1) as f64;
    1.0 - ChiSquared::new(dof).expect("dof").cdf(stat)
}

/// MC estimate of the Laplace functional `E e^{⟨f,γ⟩}` and its closed form.
pub fn laplace_check(space: &Space, window: &Window, f: &TestFunction, plan: &McPlan) -> Result<(McEstimate, f64)> {
    let sampler = Sampler::new(space, window)?;
    // e^f - 1 vanishes off the support, so integrate over it when it is smaller.
    let region = match (space.manifold(), window, f.support_box()) {
        (Manifold::Euclidean(_), Window::All, Some((lo, hi))) if !lo.is_empty() => Window::Box { lo, hi },
        _ => window.clone(),
    };
    let exact = space.integrate(&region, 1e-10, |p| if window.contains(&p.coords) { f.value(&p.coords).exp() - 1.0 } else { 0.0 })?.exp();
    let est = mc_mean(plan, |rng| {
        let g = sampler.sample(rng);
        Ok(g.points.iter().map(|p| f.value(&p.coords)).sum::<f64>().exp())
    })?;
    Ok((est, exact))
}

/// Options of the series evaluator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesOptions {
    /// Truncation order.
    pub k: usize,
    /// Gauss–Legendre nodes per axis.
    pub nodes: usize,
    /// Largest acceptable tail bound.
    pub tol: f64,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        Self { k: 8, nodes: 32, tol: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesValue {
    pub value: f64,
    pub tail_bound: f64,
    pub k: usize,
}

/// Set partitions of `0..r` as block lists.
fn set_partitions(r: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    let mut labels = vec![0usize; r];
    fn rec(i: usize, max: usize, labels: &mut Vec<usize>, out: &mut Vec<Vec<Vec<usize>>>) {
        if i == labels.len() {
            let mut blocks = vec![Vec::new(); max];
            for (j, &l) in labels.iter().enumerate() {
                blocks[l].push(j);
            }
            out.push(blocks);
            return;
        }
        for l in 0..=max {
            labels[i] = l;
            rec(i + 1, max.max(l + 1), labels, out);
        }
    }
    rec(0, 0, &mut labels, &mut out);
    out
}

/// `Σ_{j>n} x^j / j!` for `x ≥ 0` (all of `e^x` when `n < 0`).
fn exp_tail(x: f64, n: i64) -> f64 {
    if n < 0 {
        return x.exp();
    }
    let mut term = 1.0;
    for j in 1..=n {
        term *= x / j as f64;
    }
    // Direct summation of the remainder avoids cancellation for small tails.
    let mut tail = 0.0;
    let mut t = term;
    let mut j = n + 1;
    loop {
        t *= x / j as f64;
        tail += t;
        if t < tail * 1e-17 || t == 0.0 {
            break;
        }
        j += 1;
    }
    tail
}

/// Truncated Poisson series `e^{-σ(Λ)} Σ_{k≤K} (1/k!) ∫_{Λ^k} F dσ^{⊗k}` for
/// outer functions of the form `P(s) e^{c·s}`, with a rigorous tail bound.
///
/// The configuration is the Poisson process restricted to `window`.
pub fn expect_series(space: &Space, f: &CylinderFunction, window: &Window, opts: &SeriesOptions) -> Result<SeriesValue> {
    let (poly, tilt) = match &f.outer {
        Outer::ExpPoly { poly, tilt } => (poly, tilt),
        _ => return Err(Error::Unsupported("series evaluation needs an exp-polynomial outer function".into())),
    };
    let nodes = space.sigma_nodes(window, opts.nodes)?;
    let n_in = f.inner.len();
    // Per node: weight, e^{c·φ}, φ values; nodes outside F's window see φ = 0.
    let table: Vec<(f64, f64, Vec<f64>)> = nodes
        .iter()
        .map(|(p, w)| {
            let phis: Vec<f64> = if f.window.contains(&p.coords) {
                f.inner.iter().map(|phi| phi.value(&p.coords)).collect()
            } else {
                vec![0.0; n_in]
            };
            let e = phis.iter().zip(tilt).map(|(a, b)| a * b).sum::<f64>().exp();
            (*w, e, phis)
        })
        .collect();
    let mass: f64 = table.iter().map(|t| t.0).sum();
    let m0: f64 = table.iter().map(|t| t.0 * t.1).sum();
    let moment = |factors: &[usize], abs: bool| -> f64 {
        table
            .iter()
            .map(|(w, e, phis)| {
                let prod: f64 = factors.iter().map(|&i| phis[i]).product();
                w * e * if abs { prod.abs() } else { prod }
            })
            .sum()
    };
    let mut value_terms: Vec<(f64, usize)> = Vec::new();
    let mut bound_terms: Vec<(f64, usize)> = Vec::new();
    for mono in &poly.terms {
        let factors: Vec<usize> = mono.powers.iter().enumerate().flat_map(|(i, &p)| std::iter::repeat(i).take(p as usize)).collect();
        if factors.iter().any(|&i| i >= n_in) {
            return Err(Error::InvalidArgument("polynomial variable without inner function".into()));
        }
        for part in set_partitions(factors.len()) {
            let blocks: Vec<Vec<usize>> = part.iter().map(|b| b.iter().map(|&j| factors[j]).collect()).collect();
            let v: f64 = blocks.iter().map(|b| moment(b, false)).product();
            let a: f64 = blocks.iter().map(|b| moment(b, true)).product();
            value_terms.push((mono.coef * v, blocks.len()));
            bound_terms.push((mono.coef.abs() * a, blocks.len()));
        }
    }
    let damp = (-mass).exp();
    let head = |x: f64, n: i64| -> f64 {
        let mut term = 1.0;
        let mut s = if n >= 0 { 1.0 } else { 0.0 };
        for j in 1..=n.max(0) {
            term *= x / j as f64;
            s += term;
        }
        s
    };
    let value: f64 = damp * value_terms.iter().map(|(c, q)| c * head(m0, opts.k as i64 - *q as i64)).sum::<f64>();
    let bound_at = |k: usize| damp * bound_terms.iter().map(|(c, q)| c * exp_tail(m0, k as i64 - *q as i64)).sum::<f64>();
    let tail_bound = bound_at(opts.k);
    if tail_bound > opts.tol {
        let required_k = (opts.k..opts.k + 500).find(|&k| bound_at(k) <= opts.tol).unwrap_or(usize::MAX);
        return Err(Error::Truncation { bound: tail_bound, tol: opts.tol, required_k });
    }
    Ok(SeriesValue { value, tail_bound, k: opts.k })
}

/// Both sides of the multivariate Mecke identity, with the paired difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeckeReport {
    pub lhs: McEstimate,
    pub rhs: McEstimate,
    pub diff: McEstimate,
}

/// Nodes per axis for the inner integral when `m = 1`.
pub const MECKE_NODES: usize = 64;

/// `E Σ_{x̄ ⊂ γ} f(γ, x̄)` against `(1/m!) ∫ E f(γ ∪ x̄, x̄) σ^{⊗m}(dx̄)`.
///
/// Both sides share the base configuration. For `m = 1` the inner integral
/// uses tensor quadrature; for larger `m` the added points are drawn from
/// `σ/σ(Λ)` on a child stream.
pub fn mecke_check<F>(space: &Space, window: &Window, m: usize, f: F, plan: &McPlan) -> Result<MeckeReport>
where
    F: Fn(&[Point], &[Point]) -> f64 + Sync,
{
    if m == 0 {
        return Err(Error::InvalidArgument("m must be at least 1".into()));
    }
    let sampler = Sampler::new(space, window)?;
    let nodes = if m == 1 { space.sigma_nodes(window, MECKE_NODES)? } else { Vec::new() };
    let mass = sampler.mass();
    let fact: f64 = (1..=m).map(|i| i as f64).product();
    let summary = run_mc(plan, 2, |rng, out| {
        let g = sampler.sample(rng);
        let mut lhs = 0.0;
        for sub in g.subsets(m) {
            let xs: Vec<Point> = sub.iter().map(|&i| g.points[i].clone()).collect();
            lhs += f(&g.points, &xs);
        }
        let mut ext = g.points.clone();
        let rhs = if m == 1 {
            ext.push(Point::new(&[0.0]));
            let last = ext.len() - 1;
            let mut acc = 0.0;
            for (p, w) in &nodes {
                ext[last] = p.clone();
                acc += w * f(&ext, std::slice::from_ref(p));
            }
            acc
        } else if mass == 0.0 {
            0.0
        } else {
            let mut child = rng.child(0);
            let xs = sampler.draw_points(m, &mut child);
            ext.extend(xs.iter().cloned());
            mass.powi(m as i32) / fact * f(&ext, &xs)
        };
        out[0] = lhs;
        out[1] = rhs;
        Ok(())
    })?;
    Ok(MeckeReport { lhs: summary.estimate(0), rhs: summary.estimate(1), diff: summary.diff(0, 1) })
}
