//! Gauss–Legendre rules and tensor-product integration over coordinate boxes.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Arc<(Vec<f64>, Vec<f64>)> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<(Vec<f64>, Vec<f64>)>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rule) = cache.lock().unwrap().get(&n) {
        return rule.clone();
    }
    let rule = Arc::new(compute_gauss_legendre(n));
    cache.lock().unwrap().insert(n, rule.clone());
    rule
}

fn compute_gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n.
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = 0.0;
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Tensor-product rule with `n` nodes per axis on the box `[lo, hi]`.
/// Calls `f(point, weight)` for each node.
pub fn for_each_node(lo: &[f64], hi: &[f64], n: usize, mut f: impl FnMut(&[f64], f64)) {
    let d = lo.len();
    let rule = gauss_legendre(n);
    let (xs, ws) = (&rule.0, &rule.1);
    let half: Vec<f64> = (0..d).map(|i| 0.5 * (hi[i] - lo[i])).collect();
    let mid: Vec<f64> = (0..d).map(|i| 0.5 * (hi[i] + lo[i])).collect();
    let jac: f64 = half.iter().product();
    if jac == 0.0 {
        return;
    }
    let mut idx = vec![0usize; d];
    let mut p = vec![0.0; d];
    loop {
        let mut w = jac;
        for a in 0..d {
            p[a] = mid[a] + half[a] * xs[idx[a]];
            w *= ws[idx[a]];
        }
        f(&p, w);
        let mut a = 0;
        loop {
            if a == d {
                return;
            }
            idx[a] += 1;
            if idx[a] < n {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

pub fn integrate_box(lo: &[f64], hi: &[f64], n: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut acc = 0.0;
    for_each_node(lo, hi, n, |p, w| acc += w * f(p));
    acc
}

/// Double the per-axis node count from `start` until the relative change drops
/// below `rtol` (measured against the integral of `|f|`).
pub fn integrate_box_adaptive(
    lo: &[f64],
    hi: &[f64],
    start: usize,
    rtol: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Result<f64> {
    let d = lo.len().max(1);
    let cap = match d {
        1 => 4096,
        2 => 512,
        3 => 128,
        _ => 32,
    };
    let eval = |n: usize, f: &mut dyn FnMut(&[f64]) -> f64| {
        let mut s = 0.0;
        let mut a = 0.0;
        for_each_node(lo, hi, n, |p, w| {
            let v = f(p);
            s += w * v;
            a += w * v.abs();
        });
        (s, a)
    };
    let mut n = start.min(cap);
    let (mut prev, _) = eval(n, &mut f);
    let mut change = f64::NAN;
    while n * 2 <= cap {
        n *= 2;
        let (cur, abs) = eval(n, &mut f);
        change = (cur - prev).abs() / abs;
        if abs == 0.0 || change <= rtol {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::QuadratureNotConverged(change))
}
