//! Named test batteries built from declarative family specs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forms::{
    symmetrize, CylinderForm, CylinderFunction, LiftedVector, Outer, Polynomial, ProductTerm, RawFormField, SlotFactor,
    SymmetricFormField, TestFunction,
};
use crate::geometry::{Manifold, Point, Space, Window};
use crate::exterior::{OperatorField, SlotOperator};
use crate::pointprocess::{RngStream, Sampler};
use crate::stochastic::PotentialField;
use crate::scalar::Smooth;

/// A symmetric form field given by family and parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    /// `x_1 dx_1`.
    OuEigen {},
    /// `c(x) dx_I` on one point, `I` given as a bit mask.
    Frame { mask: u64, coeff: TestFunction },
    /// `x ↦ axis × x` on the sphere.
    Killing { axis: [f64; 3] },
    /// Tangential part of the constant field `axis` on the sphere.
    GradientLinear { axis: [f64; 3] },
    /// `c(x) vol` on one point.
    Volume { coeff: TestFunction },
    /// Symmetrized product of one factor per point.
    Product { factors: Vec<SlotFactor> },
}

fn one_point(f: SlotFactor) -> Result<SymmetricFormField> {
    symmetrize(RawFormField { m: 1, terms: vec![ProductTerm { weight: 1.0, factors: vec![f] }] })
}

fn cross(a: [f64; 3]) -> Vec<f64> {
    vec![0.0, -a[2], a[1], a[2], 0.0, -a[0], -a[1], a[0], 0.0]
}

impl FieldSpec {
    pub fn build(&self, space: &Space) -> Result<SymmetricFormField> {
        let sphere_only = |name: &str| -> Result<()> {
            match space.manifold() {
                Manifold::Sphere2 => Ok(()),
                _ => Err(Error::InvalidArgument(format!("{name} fields live on the sphere"))),
            }
        };
        match self {
            FieldSpec::OuEigen {} => one_point(SlotFactor::frame(1, TestFunction::coordinate(0, space.ambient_dim()))),
            FieldSpec::Frame { mask, coeff } => one_point(SlotFactor::frame(*mask, coeff.clone())),
            FieldSpec::Killing { axis } => {
                sphere_only("killing")?;
                one_point(SlotFactor::linear(cross(*axis), vec![0.0; 3], TestFunction::constant(1.0)))
            }
            FieldSpec::GradientLinear { axis } => {
                sphere_only("gradient-linear")?;
                one_point(SlotFactor::linear(vec![0.0; 9], axis.to_vec(), TestFunction::constant(1.0)))
            }
            FieldSpec::Volume { coeff } => one_point(SlotFactor::volume(coeff.clone())),
            FieldSpec::Product { factors } => {
                symmetrize(RawFormField { m: factors.len(), terms: vec![ProductTerm { weight: 1.0, factors: factors.clone() }] })
            }
        }
    }
}

fn unit_function() -> CylinderFunction {
    CylinderFunction::constant(1.0)
}

/// One product term `(F, ω)`; without a field it is the 0-form `F`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    #[serde(default = "unit_function")]
    pub f: CylinderFunction,
    #[serde(default)]
    pub field: Option<FieldSpec>,
}

impl TermSpec {
    pub fn build(&self, space: &Space) -> Result<CylinderForm> {
        match &self.field {
            None => Ok(CylinderForm::function(self.f.clone())),
            Some(fs) => CylinderForm::single(space, self.f.clone(), fs.build(space)?),
        }
    }
}

/// A sum of product terms.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormSpec {
    pub name: String,
    pub terms: Vec<TermSpec>,
}

impl FormSpec {
    pub fn single(name: &str, f: CylinderFunction, field: Option<FieldSpec>) -> Self {
        Self { name: name.into(), terms: vec![TermSpec { f, field }] }
    }

    pub fn build(&self, space: &Space) -> Result<CylinderForm> {
        let mut it = self.terms.iter();
        let first = it.next().ok_or_else(|| Error::InvalidArgument(format!("form {} has no terms", self.name)))?;
        let mut w = first.build(space)?;
        for t in it {
            w = w.plus(&t.build(space)?)?;
        }
        Ok(w)
    }
}

/// `f(γ, x̄)` for the Mecke identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MeckeFunction {
    /// `Π φ(x_i)`.
    Product { phi: TestFunction },
    /// `Π φ(x_i) · exp(-Σ_{y ∈ γ} ψ(y))`.
    Weighted { phi: TestFunction, psi: TestFunction },
    /// `Π φ(x_i) · Σ_{y ∈ γ} ψ(y)`.
    Linear { phi: TestFunction, psi: TestFunction },
}

impl MeckeFunction {
    pub fn eval(&self, gamma: &[Point], xbar: &[Point]) -> f64 {
        let prod = |phi: &TestFunction| xbar.iter().map(|x| phi.value(&x.coords)).product::<f64>();
        match self {
            MeckeFunction::Product { phi } => prod(phi),
            MeckeFunction::Weighted { phi, psi } => {
                prod(phi) * (-gamma.iter().map(|y| psi.value(&y.coords)).sum::<f64>()).exp()
            }
            MeckeFunction::Linear { phi, psi } => prod(phi) * gamma.iter().map(|y| psi.value(&y.coords)).sum::<f64>(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedMecke {
    pub name: String,
    pub m: usize,
    pub f: MeckeFunction,
}

/// `(F1, F2, V)` with `V` given as a 1-form of `m = 1` terms.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbpTriple {
    pub name: String,
    pub f1: CylinderFunction,
    pub f2: CylinderFunction,
    pub v: FormSpec,
}

impl IbpTriple {
    pub fn vector(&self, space: &Space) -> Result<LiftedVector> {
        LiftedVector::new(self.v.build(space)?)
    }
}

fn gauss(c: &[f64], w: f64) -> TestFunction {
    TestFunction::gaussian(c, w, 1.0)
}

fn exp_poly(poly: Polynomial, tilt: Vec<f64>, inner: Vec<TestFunction>) -> CylinderFunction {
    CylinderFunction::new(Outer::ExpPoly { poly, tilt }, inner)
}

fn cosine(freq: Vec<f64>, phase: f64, inner: Vec<TestFunction>) -> CylinderFunction {
    CylinderFunction::new(Outer::Cosine { freq, phase, amplitude: 1.0 }, inner)
}

/// Five bumps on the plane for the Laplace functional.
pub fn laplace_bumps() -> Vec<TestFunction> {
    vec![
        TestFunction::bump(&[0.0, 0.0], 1.0, 1.0),
        TestFunction::bump(&[0.5, -0.3], 1.5, -0.7),
        TestFunction::bump(&[-1.0, 0.8], 0.8, 2.0),
        TestFunction::bump(&[1.2, 1.0], 2.0, 0.5),
        TestFunction::bump(&[0.0, -1.5], 1.2, -1.5),
    ]
}

/// Exp-polynomial cylinder function on a window of mass about 1.3.
pub fn series_case() -> (CylinderFunction, Window) {
    let f = exp_poly(
        Polynomial::constant(1.0).plus(0.8, &[1, 0]).plus(-0.5, &[0, 2]),
        vec![-0.4, 0.3],
        vec![gauss(&[0.1, 0.0], 0.7), TestFunction::bump(&[-0.2, 0.2], 0.9, 1.0)],
    );
    (f, Window::cube(2, 0.6))
}

/// Functions for the Mecke identity; the first is `f = φ` with `∫ φ dσ = π`.
pub fn mecke_functions(d: usize) -> Vec<NamedMecke> {
    let origin = vec![0.0; d];
    let mut off = vec![0.0; d];
    off[0] = 0.4;
    let phi = gauss(&origin, 1.0);
    let psi = TestFunction::gaussian(&off, 0.8, 0.6);
    vec![
        NamedMecke { name: "phi".into(), m: 1, f: MeckeFunction::Product { phi: phi.clone() } },
        NamedMecke { name: "weighted".into(), m: 1, f: MeckeFunction::Weighted { phi: gauss(&off, 0.7), psi: psi.clone() } },
        NamedMecke { name: "linear".into(), m: 1, f: MeckeFunction::Linear { phi: phi.clone(), psi: TestFunction::bump(&origin, 1.5, 1.0) } },
        NamedMecke { name: "pair product".into(), m: 2, f: MeckeFunction::Product { phi: phi.clone() } },
        NamedMecke { name: "pair weighted".into(), m: 2, f: MeckeFunction::Weighted { phi, psi } },
    ]
}

/// Five integration-by-parts triples on the plane.
pub fn ibp_triples() -> Vec<IbpTriple> {
    let phi = gauss(&[0.3, -0.2], 0.8);
    let psi = TestFunction::gaussian_poly(&[-0.2, 0.4], 0.7, Polynomial::monomial(1.0, &[1, 0]).plus(0.5, &[0, 1]));
    let bump = TestFunction::bump(&[0.0, 0.3], 1.6, 1.0);
    let frame = |mask: u64, c: TestFunction| Some(FieldSpec::Frame { mask, coeff: c });
    vec![
        IbpTriple {
            name: "linear pair, constant field".into(),
            f1: CylinderFunction::linear(phi.clone()),
            f2: CylinderFunction::linear(psi.clone()),
            v: FormSpec::single("v", unit_function(), frame(1, TestFunction::constant(1.0))),
        },
        IbpTriple {
            name: "exponential, radial field".into(),
            f1: CylinderFunction::exponential(phi.clone(), -0.5),
            f2: CylinderFunction::constant(1.0),
            v: FormSpec::single("v", unit_function(), Some(FieldSpec::OuEigen {})),
        },
        IbpTriple {
            name: "cosine, weighted field".into(),
            f1: cosine(vec![1.2, -0.5], 0.3, vec![phi.clone(), bump.clone()]),
            f2: CylinderFunction::linear(bump.clone()),
            v: FormSpec::single("v", CylinderFunction::exponential(psi.clone(), 0.3), frame(2, phi.clone())),
        },
        IbpTriple {
            name: "exp-poly, bump field".into(),
            f1: exp_poly(Polynomial::constant(0.5).plus(1.0, &[2]), vec![-0.3], vec![psi.clone()]),
            f2: cosine(vec![0.7], 0.0, vec![phi.clone()]),
            v: FormSpec::single("v", unit_function(), frame(1, bump.clone())),
        },
        IbpTriple {
            name: "two-term field".into(),
            f1: CylinderFunction::linear(TestFunction::coordinate(1, 2)),
            f2: CylinderFunction::exponential(bump, -0.4),
            v: FormSpec {
                name: "v".into(),
                terms: vec![
                    TermSpec { f: CylinderFunction::linear(phi.clone()), field: frame(1, psi.clone()) },
                    TermSpec { f: unit_function(), field: frame(2, TestFunction::gaussian_poly(&[0.0, 0.0], 1.2, Polynomial::monomial(1.0, &[0, 1]))) },
                ],
            },
        },
    ]
}

/// Cylinder 0-forms on the plane.
pub fn plane_functions() -> Vec<FormSpec> {
    let phi = gauss(&[0.3, -0.2], 0.8);
    let bump = TestFunction::bump(&[0.0, 0.3], 1.6, 1.0);
    vec![
        FormSpec::single("exponential", CylinderFunction::exponential(phi.clone(), 0.5), None),
        FormSpec::single("cosine", cosine(vec![1.0, 0.7], 0.1, vec![phi.clone(), bump.clone()]), None),
        FormSpec::single("exp-poly", exp_poly(Polynomial::monomial(1.0, &[1]).plus(0.5, &[0]), vec![-0.3], vec![bump]), None),
    ]
}

/// 1- and 2-forms on the plane with `m ≤ 2`.
pub fn plane_forms() -> Vec<FormSpec> {
    let phi = gauss(&[0.3, -0.2], 0.8);
    let psi = TestFunction::gaussian_poly(&[-0.2, 0.4], 0.7, Polynomial::monomial(1.0, &[1, 0]).plus(0.5, &[0, 1]));
    let f = exp_poly(Polynomial::monomial(1.0, &[1]).plus(0.5, &[0]), vec![-0.3], vec![phi.clone()]);
    vec![
        FormSpec::single("ou eigenform", unit_function(), Some(FieldSpec::OuEigen {})),
        FormSpec {
            name: "one-point 1-form".into(),
            terms: vec![
                TermSpec { f: f.clone(), field: Some(FieldSpec::Frame { mask: 2, coeff: psi.clone() }) },
                TermSpec { f: unit_function(), field: Some(FieldSpec::Frame { mask: 1, coeff: phi.clone() }) },
            ],
        },
        FormSpec::single(
            "two-point 2-form",
            CylinderFunction::exponential(psi.clone(), 0.4),
            Some(FieldSpec::Product { factors: vec![SlotFactor::frame(1, phi.clone()), SlotFactor::frame(2, psi.clone())] }),
        ),
        FormSpec::single("one-point 2-form", f, Some(FieldSpec::Frame { mask: 3, coeff: phi })),
    ]
}

/// Forms on the sphere: Killing and gradient fields, a volume form and a two-point form.
pub fn sphere_forms() -> Vec<FormSpec> {
    let phi = TestFunction::gaussian(&[0.0, 0.0, 1.0], 0.9, 1.0);
    let psi = TestFunction::gaussian_poly(&[0.3, -0.5, 0.4], 0.8, Polynomial::monomial(1.0, &[1, 0, 0]));
    let f = CylinderFunction::exponential(phi.clone(), 0.3);
    vec![
        FormSpec::single("killing", unit_function(), Some(FieldSpec::Killing { axis: [0.2, -0.5, 0.7] })),
        FormSpec::single("gradient", f.clone(), Some(FieldSpec::GradientLinear { axis: [0.6, 0.1, -0.3] })),
        FormSpec::single("weighted killing", CylinderFunction::linear(psi.clone()), Some(FieldSpec::Product {
            factors: vec![SlotFactor::linear(cross([1.0, 0.0, 0.0]), vec![0.0; 3], phi.clone())],
        })),
        FormSpec::single("volume", f, Some(FieldSpec::Volume { coeff: psi.clone() })),
        FormSpec::single(
            "two-point 2-form",
            unit_function(),
            Some(FieldSpec::Product {
                factors: vec![
                    SlotFactor::linear(cross([0.0, 0.0, 1.0]), vec![0.0; 3], TestFunction::constant(1.0)),
                    SlotFactor::linear(vec![0.0; 9], vec![1.0, 0.0, 0.5], psi),
                ],
            }),
        ),
    ]
}

/// Pairs `(W, V)` with `deg V = deg W + 1` on the plane.
pub fn adjoint_pairs() -> Vec<(FormSpec, FormSpec)> {
    let funcs = plane_functions();
    let forms = plane_forms();
    vec![
        (funcs[0].clone(), forms[0].clone()),
        (funcs[1].clone(), forms[1].clone()),
        (forms[0].clone(), forms[3].clone()),
        (forms[1].clone(), forms[2].clone()),
    ]
}

/// Point-dependent symmetric field on the plane, `A(x)` lifted to each degree.
///
/// `A(x) = [[sin x1, c/2], [c/2, -cos x2]]` with `c = cos(x1 x2)`, so its
/// spectrum lies in `[-3/2, 3/2]`.
#[derive(Debug)]
pub struct SwirlField;

impl OperatorField for SwirlField {
    fn at(&self, _space: &Space, p: &Point, k: usize) -> SlotOperator {
        let x = &p.coords;
        let c = 0.5 * (x[0] * x[1]).cos();
        let a = nalgebra::DMatrix::from_row_slice(2, 2, &[x[0].sin(), c, c, -x[1].cos()]);
        SlotOperator::leibniz_lift(&a, k)
    }
}

/// Potentials for the bound checks on the plane.
pub fn potentials() -> Vec<(String, PotentialField)> {
    vec![
        ("zero".into(), PotentialField::Zero),
        ("de rham".into(), PotentialField::DeRham),
        ("constant".into(), PotentialField::Constant(-0.5)),
        ("swirl".into(), PotentialField::Custom { field: std::sync::Arc::new(SwirlField), bounds: vec![0.0, 1.5, 3.0] }),
    ]
}

/// `count` Poisson configurations on `window`, drawn from `seed`.
pub fn sample_configurations(space: &Space, window: &Window, count: usize, seed: u64) -> Result<Vec<Vec<Point>>> {
    let sampler = Sampler::new(space, window)?;
    Ok((0..count).map(|i| sampler.sample(&mut RngStream::for_sample(seed, 0xc0f, i as u32)).points).collect())
}

/// `count` tuples of `m` distinct points drawn from `σ` restricted to `window`.
pub fn sample_points(space: &Space, window: &Window, m: usize, count: usize, seed: u64) -> Result<Vec<Vec<Point>>> {
    let sampler = Sampler::new(space, window)?;
    Ok((0..count).map(|i| sampler.draw_points(m, &mut RngStream::for_sample(seed, 0x9a7, i as u32))).collect())
}
