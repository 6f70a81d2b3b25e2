//! Product rules for the configuration gradient and `d^Γ`, against the
//! analytic backend and central differences.

use confspace::battery::FieldSpec;
use confspace::forms::{eval_form_points, grad_gamma, CylinderForm, CylinderFunction, FormValue, Outer, Polynomial, TestFunction};
use confspace::geometry::{Point, Space};
use confspace::operators::{d_gamma, wedge_at, Backend, FdOrder, FdScheme};
use proptest::prelude::*;

const H: f64 = 1e-4;
const TOL: f64 = 1e-5;

#[derive(Debug)]
struct Case {
    f: CylinderFunction,
    g: CylinderFunction,
    fg: CylinderFunction,
    psi: TestFunction,
    pts: Vec<Point>,
}

fn case(c1: [f64; 2], c2: [f64; 2], c3: [f64; 2], w: [f64; 3], tilt: f64, pts: Vec<[f64; 2]>) -> Case {
    let phi1 = TestFunction::gaussian(&c1, w[0], 1.0);
    let phi2 = TestFunction::gaussian(&c2, w[1], 1.0);
    let psi = TestFunction::gaussian_poly(&c3, w[2], Polynomial::constant(0.5).plus(1.0, &[1, 0]));
    Case {
        f: CylinderFunction::linear(phi1.clone()),
        g: CylinderFunction::exponential(phi2.clone(), tilt),
        fg: CylinderFunction::new(Outer::ExpPoly { poly: Polynomial::monomial(1.0, &[1, 0]), tilt: vec![0.0, tilt] }, vec![phi1, phi2]),
        psi,
        pts: pts.iter().map(|p| Point::new(p)).collect(),
    }
}

fn fd_grad(f: &CylinderFunction, pts: &[Point]) -> Vec<[f64; 2]> {
    (0..pts.len())
        .map(|p| {
            let mut g = [0.0; 2];
            for (a, ga) in g.iter_mut().enumerate() {
                let shifted = |h: f64| {
                    let mut q = pts.to_vec();
                    q[p].coords[a] += h;
                    f.eval_points(&q)
                };
                *ga = (shifted(H) - shifted(-H)) / (2.0 * H);
            }
            g
        })
        .collect()
}

fn point() -> impl Strategy<Value = [f64; 2]> {
    [-1.5..1.5f64, -1.5..1.5f64]
}

fn cases() -> impl Strategy<Value = Case> {
    (point(), point(), point(), [0.5..1.2f64, 0.5..1.2f64, 0.5..1.2f64], -0.8..0.8f64, prop::collection::vec(point(), 2..6))
        .prop_map(|(c1, c2, c3, w, t, pts)| case(c1, c2, c3, w, t, pts))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn gradient_of_a_product(c in cases()) {
        let s = Space::gaussian(2);
        let (gf, gg, gfg) = (grad_gamma(&s, &c.f, &c.pts), grad_gamma(&s, &c.g, &c.pts), grad_gamma(&s, &c.fg, &c.pts));
        let (vf, vg) = (c.f.eval_points(&c.pts), c.g.eval_points(&c.pts));
        let fd = fd_grad(&c.fg, &c.pts);
        for p in 0..c.pts.len() {
            for a in 0..2 {
                let rule = vf * gg[p][a] + vg * gf[p][a];
                prop_assert!((gfg[p][a] - rule).abs() < 1e-12 * (1.0 + rule.abs()));
                prop_assert!((gfg[p][a] - fd[p][a]).abs() < TOL, "fd {} vs {}", fd[p][a], gfg[p][a]);
            }
        }
    }

    #[test]
    fn exterior_derivative_of_a_product(c in cases()) {
        // d(F W) by central differences of the pointwise product, against dF ∧ W + F dW.
        let s = Space::gaussian(2);
        let omega = FieldSpec::Frame { mask: 1, coeff: c.psi.clone() }.build(&s).unwrap();
        let w = CylinderForm::single(&s, c.g.clone(), omega).unwrap();
        let product = |q: &[Point]| eval_form_points(&s, &w, q).scale(c.f.eval_points(q));
        let mut lhs = FormValue::zero(2, 2);
        for p in 0..c.pts.len() {
            for a in 0..2 {
                let shifted = |h: f64| {
                    let mut q = c.pts.clone();
                    q[p].coords[a] += h;
                    product(&q)
                };
                let diff = shifted(H).sub(&shifted(-H)).scale(1.0 / (2.0 * H));
                lhs.add_scaled(&wedge_at(&diff, p, a), 1.0);
            }
        }
        let wv = eval_form_points(&s, &w, &c.pts);
        let mut rule = d_gamma(&s, &w, &c.pts, Backend::Analytic).unwrap().scale(c.f.eval_points(&c.pts));
        for (p, g) in grad_gamma(&s, &c.f, &c.pts).iter().enumerate() {
            for (a, ga) in g.iter().enumerate() {
                rule.add_scaled(&wedge_at(&wv, p, a), *ga);
            }
        }
        prop_assert!(lhs.max_abs_diff(&rule) < TOL, "residual {:e}", lhs.max_abs_diff(&rule));
        let fd = d_gamma(&s, &w, &c.pts, Backend::Fd(FdScheme::new(H, FdOrder::Central2).unwrap())).unwrap();
        let exact = d_gamma(&s, &w, &c.pts, Backend::Analytic).unwrap();
        prop_assert!(exact.max_abs_diff(&fd) < TOL);
    }
}
