//! Experiment runner: configuration, named experiments, run records and output.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::battery::{self, FormSpec};
use crate::error::Error;
use crate::forms::{eval_form_points, CylinderForm, CylinderFunction, Polynomial, TestFunction};
use crate::geometry::{Intensity, Point, Space, Window};
use crate::operators::{
    adjointness_check, adjointness_x, d_gamma_twice, dirichlet_check, factorization_residual, ibp_check, lift,
    weitz_correction, weitzenbock_residual, Backend, DirichletLevel, FdScheme, LiftOp, OperatorReport, Relation, XForm,
};
use crate::pointprocess::{
    expect_series, laplace_check, mc_mean, mecke_check, McEstimate, McPlan, Sampler, SeriesOptions,
};
use crate::exterior::SlotOperator;
use crate::scalar::Smooth;
use crate::stochastic::{
    domination_check, factorization_sem_check, frame_bound_check, generator_check, semigroup_property_check,
    semigroup_tn, JChoice, PotentialField, SdeConfig, SdeScheme,
};

/// Experiment names accepted by [`run`].
pub const EXPERIMENTS: &[&str] = &[
    "laplace",
    "series-vs-mc",
    "mecke",
    "ibp",
    "dirichlet",
    "factorization",
    "weitzenbock",
    "adjointness",
    "semigroup-ou",
    "generator",
    "bounds",
    "acceptance-all",
];

/// Battery names understood by each experiment; `default` selects all of them.
pub fn battery_names(experiment: &str) -> &'static [&'static str] {
    match experiment {
        "laplace" => &["bumps"],
        "series-vs-mc" => &["series"],
        "mecke" => &["mecke-m1", "mecke-m2"],
        "ibp" => &["ibp"],
        "dirichlet" => &["functions", "bochner", "de-rham", "ou-eigen"],
        "factorization" | "weitzenbock" => &["plane", "sphere"],
        "adjointness" => &["d-squared", "quadrature", "monte-carlo"],
        "semigroup-ou" => &["decay", "semigroup", "factorization"],
        "generator" => &["bochner", "de-rham", "functions"],
        "bounds" => &["frame-norm", "domination"],
        _ => &[],
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Numeric(#[from] Error),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SpaceSpec {
    /// `ℝ^dim` with `ρ = exp(-|x|²/(2 scale²))`.
    Gaussian { dim: usize, scale: f64 },
    /// Unit sphere with uniform intensity.
    Sphere {},
}

impl SpaceSpec {
    pub fn build(&self) -> crate::Result<Space> {
        match self {
            SpaceSpec::Gaussian { dim, scale } => Space::euclidean(*dim, Intensity::Gaussian { scale: *scale }),
            SpaceSpec::Sphere {} => Ok(Space::sphere2()),
        }
    }

    fn is_default_plane(&self) -> bool {
        *self == SpaceSpec::Gaussian { dim: 2, scale: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

/// Deterministic tolerances; Monte Carlo checks use three standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Analytic residuals on the plane.
    pub exact: f64,
    /// Finite-difference residuals on the sphere.
    pub exact_fd: f64,
    /// `d∘d` and quadrature adjointness.
    pub d_squared: f64,
    /// Series tail tolerance at `K = 8`.
    pub series_tail: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { exact: 1e-8, exact_fd: 1e-4, d_squared: 1e-10, series_tail: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: Option<String>,
    pub space: SpaceSpec,
    pub window: Window,
    pub batteries: Vec<String>,
    pub samples: usize,
    pub seed: u64,
    /// Horizons of the eigenform decay checks.
    pub decay_times: Vec<f64>,
    /// Euler step of the decay checks.
    pub dt: f64,
    /// Euler steps per horizon in the generator check.
    pub generator_steps: usize,
    /// Configurations for the deterministic residual checks.
    pub configurations: usize,
    /// Paths for the frame norm bound.
    pub paths: usize,
    pub tolerances: Tolerances,
    pub out: Option<PathBuf>,
    pub format: Format,
    /// Store the wall-clock time; off by default so records are byte-stable.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            space: SpaceSpec::Gaussian { dim: 2, scale: 1.0 },
            window: Window::All,
            batteries: vec!["default".into()],
            samples: 100_000,
            seed: 42,
            decay_times: vec![0.25, 0.5],
            dt: 2.5e-3,
            generator_steps: 10,
            configurations: 50,
            paths: 200,
            tolerances: Tolerances::default(),
            out: None,
            format: Format::Json,
            record_timing: false,
        }
    }
}

fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| l.trim_start().starts_with(key)).map(|i| i + 1)
}

impl ExperimentConfig {
    /// Parse a TOML config; errors carry the offending line.
    pub fn from_toml(text: &str) -> HarnessResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate().map_err(|(key, msg)| match line_of(text, key) {
            Some(l) => HarnessError::Config(format!("line {l}: {key}: {msg}")),
            None => HarnessError::Config(format!("{key}: {msg}")),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> HarnessResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Range checks independent of the experiment; reports the offending key.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if let Some(e) = &self.experiment {
            if !EXPERIMENTS.contains(&e.as_str()) {
                return Err(("experiment", format!("unknown experiment {e:?}")));
            }
        }
        self.space.build().map_err(|e| ("space", e.to_string()))?;
        if self.samples < 2 {
            return Err(("samples", "need at least 2".into()));
        }
        if self.decay_times.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(("decay_times", "horizons must be positive".into()));
        }
        if !(self.dt > 0.0) || self.decay_times.iter().any(|t| self.dt > *t) {
            return Err(("dt", "need 0 < dt ≤ every decay time".into()));
        }
        if self.generator_steps == 0 {
            return Err(("generator_steps", "must be positive".into()));
        }
        if self.configurations == 0 || self.paths == 0 {
            return Err(("configurations", "counts must be positive".into()));
        }
        let t = &self.tolerances;
        if [t.exact, t.exact_fd, t.d_squared, t.series_tail].iter().any(|v| !(*v > 0.0)) {
            return Err(("tolerances", "must be positive".into()));
        }
        if let Window::Box { lo, hi } = &self.window {
            if lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| a > b) {
                return Err(("window", "box needs lo ≤ hi of equal length".into()));
            }
        }
        Ok(())
    }

    /// Checks that depend on the experiment being run.
    pub fn validate_for(&self, experiment: &str) -> HarnessResult<()> {
        if !EXPERIMENTS.contains(&experiment) {
            return Err(HarnessError::Config(format!("unknown experiment {experiment:?}; expected one of {}", EXPERIMENTS.join(", "))));
        }
        self.validate().map_err(|(k, m)| HarnessError::Config(format!("{k}: {m}")))?;
        if experiment != "acceptance-all" {
            let names = battery_names(experiment);
            for b in &self.batteries {
                if b != "default" && !names.contains(&b.as_str()) {
                    return Err(HarnessError::Config(format!(
                        "batteries: {b:?} is not a battery of {experiment}; expected default or one of {}",
                        names.join(", ")
                    )));
                }
            }
        }
        // The shipped batteries live on the Gaussian plane; only the Mecke functions are dimension free.
        if experiment != "mecke" && !self.space.is_default_plane() {
            return Err(HarnessError::Config(format!("space: {experiment} runs on the gaussian plane (dim = 2, scale = 1)")));
        }
        if let Window::Box { lo, .. } = &self.window {
            if lo.len() != self.space.build()?.ambient_dim() {
                return Err(HarnessError::Config("window: box dimension does not match the space".into()));
            }
        }
        Ok(())
    }

    fn wants(&self, experiment: &str, battery: &str) -> bool {
        experiment == "acceptance-all"
            || self.batteries.iter().any(|b| b == "default" || b == battery)
    }
}

/// One row of a run record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckRecord {
    pub check: String,
    pub criterion: Option<u32>,
    pub identity: String,
    pub lhs: f64,
    pub rhs: f64,
    pub stderr: Option<f64>,
    pub tol: f64,
    pub pass: bool,
    pub relation: Relation,
    pub seed: Option<u64>,
}

impl CheckRecord {
    pub fn new(check: impl Into<String>, r: OperatorReport) -> Self {
        Self {
            check: check.into(),
            criterion: None,
            identity: r.identity,
            lhs: r.lhs,
            rhs: r.rhs,
            stderr: r.stderr,
            tol: r.tol,
            pass: r.pass,
            relation: r.relation,
            seed: r.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub experiment: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub checks: Vec<CheckRecord>,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

impl RunRecord {
    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

pub fn to_json(record: &RunRecord) -> String {
    let mut s = serde_json::to_string_pretty(record).expect("records serialize");
    s.push('\n');
    s
}

pub fn to_csv(record: &RunRecord) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["check", "lhs", "rhs", "stderr", "tol", "pass"]).expect("in-memory write");
    for c in &record.checks {
        let se = c.stderr.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([c.check.clone(), c.lhs.to_string(), c.rhs.to_string(), se, c.tol.to_string(), c.pass.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Write the record to `path` in `format`.
pub fn emit(record: &RunRecord, format: Format, path: &Path) -> HarnessResult<()> {
    let text = match format {
        Format::Json => to_json(record),
        Format::Csv => to_csv(record),
    };
    std::fs::write(path, text).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    experiment: &'a str,
    space: Space,
}

impl Ctx<'_> {
    fn plan(&self, task: u32) -> McPlan {
        McPlan::new(self.cfg.seed, task, self.cfg.samples)
    }

    /// Smaller plan for checks whose per-sample cost is dominated by quadrature or paths.
    fn plan_scaled(&self, task: u32, divisor: usize) -> McPlan {
        McPlan::new(self.cfg.seed, task, (self.cfg.samples / divisor).max(2))
    }

    fn wants(&self, battery: &str) -> bool {
        self.cfg.wants(self.experiment, battery)
    }

    fn configurations(&self, space: &Space) -> crate::Result<Vec<Vec<Point>>> {
        battery::sample_configurations(space, &Window::All, self.cfg.configurations, self.cfg.seed)
    }
}

fn exact_estimate(value: f64, like: &McEstimate) -> McEstimate {
    McEstimate { mean: value, stderr: 0.0, ..*like }
}

fn against_exact(identity: &str, est: &McEstimate, exact: f64) -> OperatorReport {
    let diff = McEstimate { mean: est.mean - exact, ..*est };
    OperatorReport::monte_carlo(identity, est, &exact_estimate(exact, est), &diff, 3.0)
}

fn build_all(space: &Space, specs: &[FormSpec]) -> crate::Result<Vec<(String, CylinderForm)>> {
    specs.iter().map(|s| Ok((s.name.clone(), s.build(space)?))).collect()
}

fn laplace(ctx: &Ctx) -> crate::Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    for (i, f) in battery::laplace_bumps().iter().enumerate() {
        let (est, exact) = laplace_check(&ctx.space, &ctx.cfg.window, f, &ctx.plan(0x100 + i as u32))?;
        out.push(CheckRecord::new(format!("laplace bump {i}"), against_exact("laplace functional", &est, exact)));
    }
    Ok(out)
}

fn series(ctx: &Ctx) -> crate::Result<Vec<CheckRecord>> {
    let (f, window) = battery::series_case();
    let mass = ctx.space.sigma_mass(&window)?;
    let k8 = expect_series(&ctx.space, &f, &window, &SeriesOptions { k: 8, nodes: 32, tol: ctx.cfg.tolerances.series_tail })?;
    let reference = expect_series(&ctx.space, &f, &window, &SeriesOptions { k: 24, nodes: 32, tol: 1e-12 })?;
    let sampler = Sampler::new(&ctx.space, &window)?;
    let mc = mc_mean(&ctx.plan(0x200), |rng| Ok(f.eval_points(&sampler.sample(rng).points)))?;
    Ok(vec![
        CheckRecord::new("series window mass", OperatorReport::bound("window mass at most 1.5", mass, 1.5, 0.0)),
        CheckRecord::new("series vs mc", against_exact("truncated series against monte carlo", &mc, k8.value)),
        CheckRecord::new(
            "series tail bound",
            // 1e-12 covers rounding in the two partial sums.
            OperatorReport::bound("|series(8) - series(24)| within the tail bounds", (k8.value - reference.value).abs(), k8.tail_bound, reference.tail_bound + 1e-12),
        ),
    ])
}

fn mecke(ctx: &Ctx) -> crate::Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    let window = &ctx.cfg.window;
    for (i, nm) in battery::mecke_functions(ctx.space.ambient_dim()).iter().enumerate() {
        if !ctx.wants(if nm.m == 1 { "mecke-m1" } else { "mecke-m2" }) {
            continue;
        }
        // The m = 1 right side sums MECKE_NODES² quadrature nodes per sample.
        let plan = if nm.m == 1 { ctx.plan_scaled(0x300 + i as u32, 10) } else { ctx.plan(0x300 + i as u32) };
        let r = mecke_check(&ctx.space, window, nm.m, |g, x| nm.f.eval(g, x), &plan)?;
        out.push(CheckRecord::new(format!("mecke m={} {}", nm.m, nm.name), OperatorReport::from_mecke("mecke identity", &r)));
        if let (1, battery::MeckeFunction::Product { phi }) = (nm.m, &nm.f) {
            let quad = ctx.space.integrate(window, 1e-12, |p| phi.value(&p.coords))?;
            out.push(CheckRecord::new(format!("mecke m=1 {} quadrature", nm.name), against_exact("mecke sum against the quadrature integral", &r.lhs, quad)));
            if ctx.space_is_default_plane() && *window == Window::All {
                out.push(CheckRecord::new("mecke phi integral", OperatorReport::deterministic("quadrature integral equals pi", quad, PI, 1e-8)));
            }
        }
    }
    Ok(out)
}

impl Ctx<'_> {
    fn space_is_default_plane(&self) -> bool {
        self.cfg.space.is_default_plane()
    }
}

fn ibp(ctx: &Ctx) -> crate::Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    for (i, t) in battery::ibp_triples().iter().enumerate() {
        let v = t.vector(&ctx.space)?;
        let r = ibp_check(&ctx.space, &t.f1, &t.f2, &v, &ctx.cfg.window, &ctx.plan(0x400 + i as u32))?;
        out.push(CheckRecord::new(format!("ibp {}", t.name), r));
    }
    Ok(out)
}

fn ou_eigenform(space: &Space) -> crate::Result<CylinderForm> {
    FormSpec::single("ou eigenform", CylinderFunction::constant(1.0), Some(battery::FieldSpec::OuEigen {})).build(space)
}

fn dirichlet(ctx: &Ctx) -> crate::Result<Vec<CheckRecord>> {
    let s = &ctx.space;
    let mut out = Vec::new();
    let funcs = build_all(s, &battery::plane_functions())?;
    let forms = build_all(s, &battery::plane_forms())?;
    let levels = [
        ("functions", DirichletLevel::Functions, &funcs, vec![(0, 1), (1, 2), (2, 2)], 4),
        ("bochner", DirichletLevel::Bochner, &forms, vec![(0, 1), (1, 1), (2, 2), (3, 3)], 20),
        ("de-rham", DirichletLevel::DeRham, &forms, vec![(0, 1), (1, 1), (2, 2), (3, 3)], 20),
    ];
    let mut task = 0x500;
    for (name, level, set, pairs, scale) in levels {
        if !ctx.wants(name) {
            continue;
        }
        for (a, b) in pairs {
            task += 1;
            let r = dirichlet_check(s, level, &set[a].1, &set[b].1, &ctx.cfg.window, &ctx.plan_scaled(task, scale), Backend::Analytic)?;
            out.push(CheckRecord::new(format!("dirichlet {name}: {} / {}", set[a].0, set[b].0), r));
        }
    }
    if ctx.wants("ou-eigen") {
        let w = ou_eigenform(s)?;
        let (mut hb, mut hr) = (0.0f64, 0.0f64);
        for g in ctx.configurations(s)? {
            let val = eval_form_points(s, &w, &g);
            hb = hb.max(lift(s, LiftOp::Bochner, &w, &g, Backend::Analytic)?.max_abs_diff(&val));
            hr = hr.max(lift(s, LiftOp::DeRham, &w, &g, Backend::Analytic)?.max_abs_diff(&val.scale(2.0)));
        }
        let tol = ctx.cfg.tolerances.exact;
        out.push(CheckRecord::new("ou eigenform bochner", OperatorReport::bound("H^B x1dx1 = x1dx1", hb, 0.0, tol)));
        out.push(CheckRecord::new("ou eigenform de rham", OperatorReport::bound("H^R x1dx1 = 2 x1dx1", hr, 0.0, tol)));
    }
    Ok(out)
}

fn fd() -> Backend {
    Backend::Fd(FdScheme::default())
}

fn residual_battery(
    ctx: &Ctx,
    space: &Space,
    forms: &[(String, CylinderForm)],
    mut f: impl FnMut(&CylinderForm, &[Point], usize) -> crate::Result<f64>,
) -> crate::Result<Vec<(String, f64)>> {
    let configs = ctx.configurations(space)?;
    let mut out = Vec::new();
    for (name, w) in forms {
        let mut worst: f64 = 0.0;
        for (i, g) in configs.iter().enumerate() {
            worst = worst.max(f(w, g, i)?);
        }
        out.push((name.clone(), worst));
    }
    Ok(out)
}

fn factorization(ctx: &Ctx) -> crate::Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    let seed = ctx.cfg.seed;
    let n = ctx.cfg.configurations;
    for (bat, space, specs, backend, tol) in [
        ("plane", ctx.space.clone(), battery::plane_forms(), Backend::Analytic, ctx.cfg.tolerances.exact),
        ("sphere", Space::sphere2(), battery::sphere_forms(), fd(), ctx.cfg.tolerances.exact_fd),
    ] {
        if !ctx.wants(bat) {
            continue;
        }
        let forms = build_all(&space, &specs)?;
        let xbars: Vec<Vec<Vec<Point>>> = (1..=2).map(|m| battery::sample_points(&space, &Window::All, m, n, seed + m as u64)).collect::<crate::Result<_>>()?;
        for op in [LiftOp::Bochner, LiftOp::DeRham] {
            let rows = residual_battery(ctx, &space, &forms, |w, g, i| {
                let mut r: f64 = 0.0;
                for xb in &xbars {
                    r = r.max(factorization_residual(&space, op, w, g, &xb[i], backend)?);
                }
                Ok(r)
            })?;
            for (name, r) in rows {
                out.push(CheckRecord::new(format!("factorization {bat} {op:?}: {name}").to_lowercase(), OperatorReport::bound("intertwining residual", r, 0.0, tol)));
            }
        }
        if bat == "plane" {
            let funcs = build_all(&space, &battery::plane_functions())?;
            let rows = residual_battery(ctx, &space, &funcs, |w, g, _| factorization_residual(&space, LiftOp::Dirichlet, w, g, &[], backend))?;
            for (name, r) in rows {
                out.push(CheckRecord::new(format!("factorization plane functions: {name}"), OperatorReport::bound("intertwining residual", r, 0.0, tol)));
            }
        }
    }
    Ok(out)
}

fn weitzenbock(ctx: &Ctx) -> crate::Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    for (bat, space, specs, backend, tol) in [
        ("plane", ctx.space.clone(), battery::plane_forms(), Backend::Analytic, ctx.cfg.tolerances.exact),
        ("sphere", Space::sphere2(), battery::sphere_forms(), fd(), ctx.cfg.tolerances.exact_fd),
    ] {
        if !ctx.wants(bat) {
            continue;
        }
        let forms = build_all(&space, &specs)?;
        for (name, r) in residual_battery(ctx, &space, &forms, |w, g, _| weitzenbock_residual(&space, w, g, backend))? {
            out.push(CheckRecord::new(format!("weitzenbock {bat}: {name}"), OperatorReport::bound("H^R - H^B - R residual", r, 0.0, tol)));
        }
        // The correction itself: n·I on the Gaussian plane, 1·I on sphere 1-forms.
        let pts = battery::sample_points(&space, &Window::All, 1, ctx.cfg.configurations, ctx.cfg.seed)?;
        let degrees: Vec<(usize, f64)> = if bat == "plane" { vec![(0, 0.0), (1, 1.0), (2, 2.0)] } else { vec![(1, 1.0)] };
        let mut worst: f64 = 0.0;
        for p in pts.iter().map(|v| &v[0]) {
            for &(k, c) in &degrees {
                let target = SlotOperator::scaled_identity(space.dim(), k, c).matrix;
                worst = worst.max((weitz_correction(&space, p, k).matrix - target).abs().max());
            }
        }
        let label = if bat == "plane" { "correction equals n I" } else { "correction equals I on 1-forms" };
        out.push(CheckRecord::new(format!("weitzenbock {bat} correction"), OperatorReport::bound(label, worst, 0.0, tol)));
    }
    Ok(out)
}

fn adjointness(ctx: &Ctx) -> crate::Result<Vec<CheckRecord>> {
    let s = &ctx.space;
    let tol = ctx.cfg.tolerances.d_squared;
    let mut out = Vec::new();
    if ctx.wants("d-squared") {
        let mut forms = build_all(s, &battery::plane_functions())?;
        forms.extend(build_all(s, &battery::plane_forms())?);
        for (name, r) in residual_battery(ctx, s, &forms, |w, g, _| Ok(d_gamma_twice(s, w, g)?.max_abs()))? {
            out.push(CheckRecord::new(format!("d squared: {name}"), OperatorReport::bound("d d W = 0", r, 0.0, tol)));
        }
    }
    if ctx.wants("quadrature") {
        let field = |c: TestFunction, mask: u64| battery::FieldSpec::Frame { mask, coeff: c }.build(s);
        let pairs = vec![
            ("function / 1-form", XForm::Function(TestFunction::gaussian(&[0.3, -0.2], 0.8, 1.0)), XForm::Field(field(TestFunction::gaussian_poly(&[-0.2, 0.4], 0.7, Polynomial::monomial(1.0, &[1, 0])), 1)?)),
            ("1-form / 2-form", XForm::Field(field(TestFunction::gaussian(&[0.1, 0.1], 0.6, 1.0), 2)?), XForm::Field(field(TestFunction::gaussian(&[-0.3, 0.2], 0.9, 1.0), 3)?)),
        ];
        for (name, om, eta) in pairs {
            let (a, b) = adjointness_x(s, &om, &eta, &Window::All, 1e-12, Backend::Analytic)?;
            out.push(CheckRecord::new(format!("adjointness on X: {name}"), OperatorReport::deterministic("<d w, e> = <w, d* e>", a, b, tol)));
        }
    }
    if ctx.wants("monte-carlo") {
        for (i, (w, v)) in battery::adjoint_pairs().iter().enumerate() {
            let r = adjointness_check(s, &w.build(s)?, &v.build(s)?, &ctx.cfg.window, &ctx.plan_scaled(0x800 + i as u32, 4), Backend::Analytic)?;
            out.push(CheckRecord::new(format!("adjointness: {} / {}", w.name, v.name), r));
        }
    }
    Ok(out)
}

fn decay_point() -> Point {
    Point::new(&[0.8, -0.4])
}

fn config_points() -> Vec<Point> {
    vec![Point::new(&[0.3, 0.1]), Point::new(&[-0.2, 0.5]), Point::new(&[0.9, -0.6])]
}

fn semigroup_ou(ctx: &Ctx) -> crate::Result<Vec<CheckRecord>> {
    let s = &ctx.space;
    let mut out = Vec::new();
    if ctx.wants("decay") {
        let w = ou_eigenform(s)?;
        let x = decay_point();
        let mut task = 0x900;
        for (choice, rate) in [(JChoice::Bochner, 1.0), (JChoice::DeRham, 2.0)] {
            for &t in &ctx.cfg.decay_times {
                task += 1;
                let cfg = SdeConfig::new(t, ctx.cfg.dt, SdeScheme::EulerMaruyama)?;
                let est = semigroup_tn(s, &w, std::slice::from_ref(&x), &cfg, &choice.potential(), &ctx.plan_scaled(task, 4))?;
                let i = est.index_of(&[0], 1).ok_or_else(|| Error::InvalidArgument("missing component".into()))?;
                let target = (-rate * t).exp() * x.coords[0];
                out.push(CheckRecord::new(format!("decay {choice:?} t={t}").to_lowercase(), against_exact("eigenform decay", &est.estimate(i), target)));
            }
        }
    }
    if ctx.wants("semigroup") {
        let cfg = SdeConfig::new(0.3, 0.01, SdeScheme::EulerMaruyama)?;
        for (i, (name, f)) in build_all(s, &battery::plane_functions())?.into_iter().enumerate() {
            let f = f.terms[0].f.clone();
            let r = semigroup_property_check(s, &f, &config_points()[..2], 0.2, 0.1, &cfg, &ctx.plan_scaled(0x920 + i as u32, 4))?;
            out.push(CheckRecord::new(format!("semigroup property: {name}"), r));
        }
    }
    if ctx.wants("factorization") {
        let w = battery::plane_forms()[1].terms[0].build(s)?;
        let cfg = SdeConfig::new(0.3, 0.01, SdeScheme::EulerMaruyama)?;
        for (i, (name, pot)) in [("bochner", PotentialField::Zero), ("de rham", PotentialField::DeRham)].into_iter().enumerate() {
            let r = factorization_sem_check(s, &w, &config_points(), &[1], 2, &cfg, &pot, &ctx.plan_scaled(0x940 + 4 * i as u32, 4))?;
            out.push(CheckRecord::new(format!("semigroup factorization: {name}"), r));
        }
    }
    Ok(out)
}

fn generator(ctx: &Ctx) -> crate::Result<Vec<CheckRecord>> {
    let s = &ctx.space;
    let steps = ctx.cfg.generator_steps;
    let mut out = Vec::new();
    let forms = build_all(s, &battery::plane_forms()[..2])?;
    let mut task = 0xa00;
    for (name, choice) in [("bochner", JChoice::Bochner), ("de-rham", JChoice::DeRham)] {
        if !ctx.wants(name) {
            continue;
        }
        for (j, (fname, w)) in forms.iter().enumerate() {
            task += 1;
            let gamma = if j == 0 { vec![decay_point()] } else { config_points()[..2].to_vec() };
            let r = generator_check(s, w, &gamma, choice, steps, &ctx.plan_scaled(task, 4))?;
            out.push(CheckRecord::new(format!("generator {name}: {fname}"), r));
        }
    }
    if ctx.wants("functions") {
        for (fname, w) in build_all(s, &battery::plane_functions())? {
            task += 1;
            let r = generator_check(s, &w, &config_points()[..2], JChoice::Bochner, steps, &ctx.plan_scaled(task, 4))?;
            out.push(CheckRecord::new(format!("generator functions: {fname}"), r));
        }
    }
    Ok(out)
}

fn bounds(ctx: &Ctx) -> crate::Result<Vec<CheckRecord>> {
    let s = &ctx.space;
    let mut out = Vec::new();
    let gamma = config_points();
    let cfg = SdeConfig::new(0.5, 0.01, SdeScheme::EulerMaruyama)?;
    if ctx.wants("frame-norm") {
        for (name, pot) in battery::potentials() {
            let r = frame_bound_check(s, &gamma, &cfg, &pot, 2, ctx.cfg.paths, ctx.cfg.seed)?;
            out.push(CheckRecord::new(format!("frame norm: {name}"), r));
        }
    }
    if ctx.wants("domination") {
        let forms = build_all(s, &battery::plane_forms())?;
        let short = SdeConfig::new(0.3, 0.01, SdeScheme::EulerMaruyama)?;
        let mut task = 0xb00;
        for (pname, pot) in battery::potentials() {
            for (fname, w) in &forms {
                task += 1;
                let r = domination_check(s, w, &gamma[..2], &short, &pot, &ctx.plan_scaled(task, 20))?;
                out.push(CheckRecord::new(format!("domination {pname}: {fname}"), r));
            }
        }
    }
    Ok(out)
}

/// Acceptance criteria: number, title and the experiment that evaluates it.
pub const CRITERIA: &[(u32, &str, &[&str])] = &[
    (1, "laplace functional", &["laplace"]),
    (2, "series oracle", &["series-vs-mc"]),
    (3, "mecke identity", &["mecke"]),
    (4, "integration by parts", &["ibp"]),
    (5, "dirichlet forms and operators", &["dirichlet"]),
    (6, "factorization", &["factorization"]),
    (7, "weitzenbock formula", &["weitzenbock"]),
    (8, "d squared and adjointness", &["adjointness"]),
    (9, "probabilistic representation", &["generator", "semigroup-ou:decay"]),
    (10, "bounds", &["bounds"]),
];

fn dispatch(ctx: &Ctx, name: &str) -> crate::Result<Vec<CheckRecord>> {
    match name {
        "laplace" => laplace(ctx),
        "series-vs-mc" => series(ctx),
        "mecke" => mecke(ctx),
        "ibp" => ibp(ctx),
        "dirichlet" => dirichlet(ctx),
        "factorization" => factorization(ctx),
        "weitzenbock" => weitzenbock(ctx),
        "adjointness" => adjointness(ctx),
        "semigroup-ou" => semigroup_ou(ctx),
        "generator" => generator(ctx),
        "bounds" => bounds(ctx),
        other => Err(Error::InvalidArgument(format!("unknown experiment {other}"))),
    }
}

/// Outcome of one acceptance criterion.
#[derive(Clone, Debug)]
pub struct CriterionOutcome {
    pub number: u32,
    pub title: &'static str,
    pub checks: Vec<CheckRecord>,
    pub error: Option<String>,
}

impl CriterionOutcome {
    pub fn pass(&self) -> bool {
        self.error.is_none() && !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }
}

/// Run one acceptance criterion with the given base configuration.
pub fn run_criterion(cfg: &ExperimentConfig, number: u32) -> CriterionOutcome {
    let &(n, title, parts) = CRITERIA.iter().find(|c| c.0 == number).expect("criterion number");
    let mut checks = Vec::new();
    let mut error = None;
    for part in parts {
        let (exp, only) = part.split_once(':').map_or((*part, None), |(e, b)| (e, Some(b)));
        let mut c = cfg.clone();
        c.batteries = vec![only.unwrap_or("default").into()];
        let space = match c.space.build() {
            Ok(s) => s,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        };
        let ctx = Ctx { cfg: &c, experiment: exp, space };
        match dispatch(&ctx, exp) {
            Ok(rows) => checks.extend(rows.into_iter().map(|mut r| {
                r.criterion = Some(n);
                r
            })),
            Err(e) => {
                error = Some(format!("{exp}: {e}"));
                break;
            }
        }
    }
    CriterionOutcome { number: n, title, checks, error }
}

/// Run a named experiment.
pub fn run(experiment: &str, cfg: &ExperimentConfig) -> HarnessResult<RunRecord> {
    cfg.validate_for(experiment)?;
    let start = Instant::now();
    let mut resolved = cfg.clone();
    resolved.experiment = Some(experiment.to_string());
    let checks = if experiment == "acceptance-all" {
        let mut all = Vec::new();
        for &(n, ..) in CRITERIA {
            let o = run_criterion(&resolved, n);
            if let Some(e) = o.error {
                return Err(HarnessError::Numeric(Error::InvalidArgument(format!("criterion {n}: {e}"))));
            }
            all.extend(o.checks);
        }
        all
    } else {
        let ctx = Ctx { cfg: &resolved, experiment, space: resolved.space.build()? };
        dispatch(&ctx, experiment)?
    };
    let pass = checks.iter().all(|c| c.pass);
    let wall_clock_s = resolved.record_timing.then(|| start.elapsed().as_secs_f64());
    Ok(RunRecord { experiment: experiment.into(), version: env!("CARGO_PKG_VERSION").into(), config: resolved, checks, pass, wall_clock_s })
}

/// Summary line of a check, as printed by the CLI and the acceptance runner.
pub fn describe(c: &CheckRecord) -> String {
    let rel = match c.relation {
        Relation::Eq => "vs",
        Relation::Le => "<=",
    };
    let se = c.stderr.map_or(String::new(), |s| format!(" se={s:.3e}"));
    format!("{} {}: {:.6e} {rel} {:.6e} tol={:.3e}{se}", if c.pass { "PASS" } else { "FAIL" }, c.check, c.lhs, c.rhs, c.tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(checks: Vec<CheckRecord>) -> RunRecord {
        RunRecord { experiment: "laplace".into(), version: "0".into(), config: ExperimentConfig::default(), pass: true, checks, wall_clock_s: None }
    }

    #[test]
    fn config_defaults_and_rejection() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let cfg = ExperimentConfig::from_toml("seed = 7\nsamples = 1000\nwindow = { kind = \"box\", lo = [-1.0, -1.0], hi = [1.0, 1.0] }\n").unwrap();
        assert_eq!((cfg.seed, cfg.samples), (7, 1000));
        let err = ExperimentConfig::from_toml("seed = 7\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("line 2"), "{err}");
        let err = ExperimentConfig::from_toml("seed = 1\nsamples = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = ExperimentConfig::from_toml("[space]\nkind = \"sphere\"\ndim = 2\n").unwrap_err().to_string();
        assert!(err.contains("dim"), "{err}");
        let cfg = ExperimentConfig { batteries: vec!["nope".into()], ..Default::default() };
        assert!(matches!(cfg.validate_for("mecke"), Err(HarnessError::Config(_))));
        assert!(ExperimentConfig::default().validate_for("other").is_err());
        let sphere = ExperimentConfig { space: SpaceSpec::Sphere {}, ..Default::default() };
        assert!(sphere.validate_for("ibp").is_err());
        assert!(sphere.validate_for("mecke").is_ok());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn emit_formats() {
        let empty = record(vec![]);
        let json = to_json(&empty);
        assert!(json.ends_with('\n'));
        let back: RunRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, empty);
        assert!(back.checks.is_empty());
        let rows = vec![
            CheckRecord::new("a, quoted", OperatorReport::deterministic("x", 1.0, 1.0, 1e-9)),
            CheckRecord::new("b", OperatorReport::bound("y", 2.0, 1.0, 0.0)),
        ];
        let rec = record(rows);
        let csv = to_csv(&rec);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("check,lhs,rhs,stderr,tol,pass\n") && csv.ends_with('\n'));
        let mut rdr = csv::Reader::from_reader(csv.as_bytes());
        assert_eq!(rdr.records().count(), rec.checks.len());
        let back: RunRecord = serde_json::from_str(&to_json(&rec)).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn small_runs_are_reproducible() {
        let cfg = ExperimentConfig { samples: 2000, ..Default::default() };
        let a = run("laplace", &cfg).unwrap();
        let b = run("laplace", &cfg).unwrap();
        assert_eq!(to_json(&a), to_json(&b));
        assert_eq!(a.checks.len(), 5);
        assert_eq!(a.config.experiment.as_deref(), Some("laplace"));
        assert!(a.wall_clock_s.is_none());
        let timed = run("laplace", &ExperimentConfig { record_timing: true, ..cfg }).unwrap();
        assert!(timed.wall_clock_s.is_some());
    }

    #[test]
    fn battery_selection() {
        let cfg = ExperimentConfig { samples: 200, configurations: 3, batteries: vec!["ou-eigen".into()], ..Default::default() };
        let r = run("dirichlet", &cfg).unwrap();
        assert_eq!(r.checks.len(), 2);
        assert!(r.pass);
    }
}
