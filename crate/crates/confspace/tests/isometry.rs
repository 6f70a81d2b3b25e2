//! `E|W|²` under the Poisson law equals the summed `L²` norms of the
//! components of `I^n W`, checked by paired Monte Carlo.

use confspace::battery::{plane_forms, sphere_forms, FormSpec};
use confspace::forms::{eval_form_points, i_n_component};
use confspace::geometry::{Space, Window};
use confspace::pointprocess::{run_mc, McPlan, Sampler};

fn check(space: &Space, specs: &[FormSpec], task: u32) {
    let sampler = Sampler::new(space, &Window::All).unwrap();
    let mass = sampler.mass();
    for (k, spec) in specs.iter().enumerate() {
        let w = spec.build(space).unwrap();
        let n = w.n;
        let plan = McPlan::new(7, task + k as u32, 20_000);
        let summary = run_mc(&plan, n + 1, |rng, out| {
            let gamma = sampler.sample(rng).points;
            let v = eval_form_points(space, &w, &gamma);
            out[0] = v.inner(&v);
            for m in 1..=n {
                let xbar = sampler.draw_points(m, rng);
                out[m] = mass.powi(m as i32) * i_n_component(space, &w, &gamma, &xbar)?.norm2();
            }
            Ok(())
        })
        .unwrap();
        let mut c = vec![-1.0; n + 1];
        c[0] = 1.0;
        let diff = summary.combo(&c);
        let lhs = summary.estimate(0);
        assert!(lhs.mean > 1e-3, "{}: degenerate form", spec.name);
        assert!(diff.within(0.0, 4.0), "{}: E|W|^2 = {:.5} but difference {:.5} ± {:.5}", spec.name, lhs.mean, diff.mean, diff.stderr);
    }
}

#[test]
fn isometry_on_plane_forms() {
    check(&Space::gaussian(2), &plane_forms(), 0x150);
}

#[test]
fn isometry_on_sphere_forms() {
    let specs = sphere_forms();
    assert_eq!(specs.len(), 5);
    check(&Space::sphere2(), &specs, 0x160);
}
