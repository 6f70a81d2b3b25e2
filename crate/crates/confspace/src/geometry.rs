//! Manifold backends: Euclidean space with a smooth intensity, and the unit
//! sphere in its ambient embedding.
//!
//! Tangent data is always expressed in an orthonormal frame at the base point.
//! On the sphere the frame is built by Gram–Schmidt from a fixed reference axis
//! (`e_z`, falling back to `e_x` near the poles), so it is smooth away from the
//! switching band.

use std::f64::consts::PI;
use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::quadrature;
use crate::scalar::Scalar;

pub type Coords<T> = SmallVec<[T; 4]>;

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub coords: Coords<f64>,
}

impl Point {
    pub fn new(coords: &[f64]) -> Self {
        Self { coords: coords.iter().copied().collect() }
    }

    pub fn dist2(&self, other: &Point) -> f64 {
        self.coords.iter().zip(&other.coords).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    pub base: Point,
    pub components: Coords<f64>,
}

impl TangentVector {
    pub fn new(base: Point, components: &[f64]) -> Self {
        Self { base, components: components.iter().copied().collect() }
    }

    pub fn norm(&self) -> f64 {
        self.components.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// Coordinate box or the whole space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Window {
    All,
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Window {
    pub fn cube(d: usize, half: f64) -> Self {
        Window::Box { lo: vec![-half; d], hi: vec![half; d] }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Window::All => true,
            Window::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *v >= *a && *v <= *b),
        }
    }
}

/// A user-supplied log-density in ambient coordinates.
pub trait LogDensity: Send + Sync + Debug {
    fn log_rho(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64]) -> Vec<f64>;
    /// Row-major ambient Hessian.
    fn hess(&self, x: &[f64]) -> Vec<f64>;
    /// Upper bound of the density on a box, used for rejection sampling.
    fn rho_max(&self, lo: &[f64], hi: &[f64]) -> f64;
    /// Box outside of which the mass is negligible; `None` if not integrable.
    fn effective_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }
}

#[derive(Clone, Debug)]
pub enum Intensity {
    /// `ρ(x) = exp(-|x|² / (2 s²))`.
    Gaussian { scale: f64 },
    Uniform,
    Custom(Arc<dyn LogDensity>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Manifold {
    Euclidean(usize),
    Sphere2,
}

/// Truncation radius (in units of the scale) used for Gaussian "all" windows.
pub const GAUSS_TRUNCATION: f64 = 12.0;

#[derive(Clone, Debug)]
pub struct Space {
    manifold: Manifold,
    intensity: Intensity,
}

impl Space {
    pub fn euclidean(d: usize, intensity: Intensity) -> Result<Self> {
        if d == 0 || d > 16 {
            return Err(Error::InvalidArgument(format!("dimension {d} not in 1..=16")));
        }
        if let Intensity::Gaussian { scale } = intensity {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::InvalidArgument("gaussian scale must be positive".into()));
            }
        }
        Ok(Self { manifold: Manifold::Euclidean(d), intensity })
    }

    /// `ℝ^d` with `ρ(x) = exp(-|x|²/2)`.
    pub fn gaussian(d: usize) -> Self {
        Self::euclidean(d, Intensity::Gaussian { scale: 1.0 }).expect("valid dimension")
    }

    /// Unit sphere with the uniform (area) intensity.
    pub fn sphere2() -> Self {
        Self { manifold: Manifold::Sphere2, intensity: Intensity::Uniform }
    }

    pub fn sphere2_with(intensity: Intensity) -> Result<Self> {
        if let Intensity::Gaussian { .. } = intensity {
            return Err(Error::Unsupported("gaussian intensity on the sphere".into()));
        }
        Ok(Self { manifold: Manifold::Sphere2, intensity })
    }

    pub fn manifold(&self) -> Manifold {
        self.manifold
    }

    pub fn intensity(&self) -> &Intensity {
        &self.intensity
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.manifold, Manifold::Euclidean(_))
    }

    /// Intrinsic dimension.
    pub fn dim(&self) -> usize {
        match self.manifold {
            Manifold::Euclidean(d) => d,
            Manifold::Sphere2 => 2,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self.manifold {
            Manifold::Euclidean(d) => d,
            Manifold::Sphere2 => 3,
        }
    }

    pub fn point(&self, coords: &[f64]) -> Result<Point> {
        if coords.len() != self.ambient_dim() || coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad coordinates {coords:?}")));
        }
        if self.manifold == Manifold::Sphere2 {
            let r = coords.iter().map(|c| c * c).sum::<f64>().sqrt();
            if (r - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("|p| = {r} is not 1")));
            }
        }
        Ok(Point::new(coords))
    }

    /// Project ambient coordinates onto the manifold (normalize on the sphere).
    pub fn project(&self, coords: &[f64]) -> Point {
        match self.manifold {
            Manifold::Euclidean(_) => Point::new(coords),
            Manifold::Sphere2 => {
                let r = coords.iter().map(|c| c * c).sum::<f64>().sqrt();
                Point::new(&coords.iter().map(|c| c / r).collect::<Vec<_>>())
            }
        }
    }

    pub fn log_rho(&self, x: &[f64]) -> f64 {
        match &self.intensity {
            Intensity::Gaussian { scale } => -x.iter().map(|c| c * c).sum::<f64>() / (2.0 * scale * scale),
            Intensity::Uniform => 0.0,
            Intensity::Custom(c) => c.log_rho(x),
        }
    }

    pub fn rho(&self, x: &[f64]) -> f64 {
        self.log_rho(x).exp()
    }

    fn ambient_grad_log_rho(&self, x: &[f64]) -> Vec<f64> {
        match &self.intensity {
            Intensity::Gaussian { scale } => x.iter().map(|c| -c / (scale * scale)).collect(),
            Intensity::Uniform => vec![0.0; x.len()],
            Intensity::Custom(c) => c.grad(x),
        }
    }

    fn ambient_hess_log_rho(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        match &self.intensity {
            Intensity::Gaussian { scale } => {
                let mut h = vec![0.0; n * n];
                for i in 0..n {
                    h[i * n + i] = -1.0 / (scale * scale);
                }
                h
            }
            Intensity::Uniform => vec![0.0; n * n],
            Intensity::Custom(c) => c.hess(x),
        }
    }

    /// Orthonormal frame at `x`, as ambient vectors.
    pub fn frame<T: Scalar>(&self, x: &[T]) -> Vec<Coords<T>> {
        match self.manifold {
            Manifold::Euclidean(d) => (0..d)
                .map(|a| (0..d).map(|b| if a == b { T::one() } else { T::zero() }).collect())
                .collect(),
            Manifold::Sphere2 => {
                let r = if x[2].re().abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
                let rp = x[0].scale(r[0]) + x[1].scale(r[1]) + x[2].scale(r[2]);
                let mut f1: Coords<T> = (0..3).map(|i| T::cst(r[i]) - rp * x[i]).collect();
                let n = (f1[0] * f1[0] + f1[1] * f1[1] + f1[2] * f1[2]).sqrt();
                for c in f1.iter_mut() {
                    *c = *c / n;
                }
                let f2: Coords<T> = [
                    x[1] * f1[2] - x[2] * f1[1],
                    x[2] * f1[0] - x[0] * f1[2],
                    x[0] * f1[1] - x[1] * f1[0],
                ]
                .into_iter()
                .collect();
                vec![f1, f2]
            }
        }
    }

    /// Frame components of an ambient vector at `x` (tangential projection).
    pub fn to_frame<T: Scalar>(&self, x: &[T], v: &[T]) -> Coords<T> {
        match self.manifold {
            Manifold::Euclidean(_) => v.iter().copied().collect(),
            Manifold::Sphere2 => self
                .frame(x)
                .iter()
                .map(|f| f.iter().zip(v).fold(T::zero(), |acc, (a, b)| acc + *a * *b))
                .collect(),
        }
    }

    pub fn to_ambient(&self, x: &[f64], comps: &[f64]) -> Coords<f64> {
        match self.manifold {
            Manifold::Euclidean(_) => comps.iter().copied().collect(),
            Manifold::Sphere2 => {
                let fr = self.frame(x);
                (0..3).map(|i| comps[0] * fr[0][i] + comps[1] * fr[1][i]).collect()
            }
        }
    }

    pub fn metric(&self, p: &Point, u: &TangentVector, v: &TangentVector) -> Result<f64> {
        if u.base != *p || v.base != *p {
            return Err(Error::InvalidArgument("tangent vectors not based at p".into()));
        }
        Ok(u.components.iter().zip(&v.components).map(|(a, b)| a * b).sum())
    }

    /// Riemann tensor in the orthonormal frame, with `R_{0101} = K`.
    pub fn curvature(&self, _p: &Point, i: usize, j: usize, k: usize, l: usize) -> Result<f64> {
        let d = self.dim();
        for idx in [i, j, k, l] {
            if idx >= d {
                return Err(Error::IndexOutOfRange { index: idx, dim: d });
            }
        }
        Ok(match self.manifold {
            Manifold::Euclidean(_) => 0.0,
            Manifold::Sphere2 => {
                let g = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
                g(i, k) * g(j, l) - g(i, l) * g(j, k)
            }
        })
    }

    /// `β = ∇ log ρ` in frame components.
    pub fn beta(&self, p: &Point) -> TangentVector {
        let g = self.ambient_grad_log_rho(&p.coords);
        TangentVector { base: p.clone(), components: self.to_frame(&p.coords, &g) }
    }

    /// Covariant derivative of `β` as a matrix `[∇_a β_b]` in the frame.
    pub fn grad_beta(&self, p: &Point) -> DMatrix<f64> {
        let d = self.dim();
        let h = self.ambient_hess_log_rho(&p.coords);
        match self.manifold {
            Manifold::Euclidean(_) => DMatrix::from_row_slice(d, d, &h),
            Manifold::Sphere2 => {
                let fr = self.frame(&p.coords);
                let g = self.ambient_grad_log_rho(&p.coords);
                let radial: f64 = (0..3).map(|i| p.coords[i] * g[i]).sum();
                DMatrix::from_fn(2, 2, |a, b| {
                    let mut s = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            s += fr[a][i] * h[i * 3 + j] * fr[b][j];
                        }
                    }
                    s - if a == b { radial } else { 0.0 }
                })
            }
        }
    }

    /// Largest admissible `h·|v|` for a single geodesic step.
    pub fn step_bound(&self) -> f64 {
        match self.manifold {
            Manifold::Euclidean(_) => f64::INFINITY,
            Manifold::Sphere2 => PI,
        }
    }

    /// `exp_p(h v)`.
    pub fn geodesic_step(&self, p: &Point, v: &TangentVector, h: f64) -> Result<Point> {
        if h < 0.0 {
            return Err(Error::InvalidArgument("negative step".into()));
        }
        self.exp_map(p, &v.components, h)
    }

    pub(crate) fn exp_map(&self, p: &Point, comps: &[f64], h: f64) -> Result<Point> {
        match self.manifold {
            Manifold::Euclidean(_) => {
                Ok(Point { coords: p.coords.iter().zip(comps).map(|(x, v)| x + h * v).collect() })
            }
            Manifold::Sphere2 => {
                let amb = self.to_ambient(&p.coords, comps);
                let speed = amb.iter().map(|c| c * c).sum::<f64>().sqrt();
                let theta = h * speed;
                if theta >= self.step_bound() {
                    return Err(Error::StepTooLarge { length: theta, bound: self.step_bound() });
                }
                if theta == 0.0 {
                    return Ok(p.clone());
                }
                let (s, c) = theta.sin_cos();
                let q: Vec<f64> = (0..3).map(|i| c * p.coords[i] + s * amb[i] / speed).collect();
                Ok(self.project(&q))
            }
        }
    }

    /// Parallel transport of frame components from `p` to `to` along the
    /// minimizing geodesic, as the matrix acting on frame components.
    pub fn transport_matrix(&self, p: &Point, to: &Point) -> Result<DMatrix<f64>> {
        let d = self.dim();
        match self.manifold {
            Manifold::Euclidean(_) => Ok(DMatrix::identity(d, d)),
            Manifold::Sphere2 => {
                let a = &p.coords;
                let b = &to.coords;
                let n = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
                let sn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                let cs: f64 = (0..3).map(|i| a[i] * b[i]).sum();
                if sn < 1e-12 && cs < 0.0 {
                    return Err(Error::StepTooLarge { length: PI, bound: PI });
                }
                let fp = self.frame(a.as_slice());
                let fq = self.frame(b.as_slice());
                let rotate = |u: &[f64]| -> [f64; 3] {
                    if sn < 1e-300 {
                        return [u[0], u[1], u[2]];
                    }
                    let k = [n[0] / sn, n[1] / sn, n[2] / sn];
                    let kxu = [k[1] * u[2] - k[2] * u[1], k[2] * u[0] - k[0] * u[2], k[0] * u[1] - k[1] * u[0]];
                    let ku = k[0] * u[0] + k[1] * u[1] + k[2] * u[2];
                    let mut out = [0.0; 3];
                    for i in 0..3 {
                        out[i] = u[i] * cs + kxu[i] * sn + k[i] * ku * (1.0 - cs);
                    }
                    out
                };
                let cols: Vec<[f64; 3]> = fp.iter().map(|f| rotate(f)).collect();
                Ok(DMatrix::from_fn(2, 2, |r, c| (0..3).map(|i| fq[r][i] * cols[c][i]).sum()))
            }
        }
    }

    pub fn transport_step(&self, p: &Point, to: &Point, u: &TangentVector) -> Result<TangentVector> {
        if u.base != *p {
            return Err(Error::InvalidArgument("vector not based at p".into()));
        }
        let m = self.transport_matrix(p, to)?;
        let v = &m * nalgebra::DVector::from_column_slice(&u.components);
        Ok(TangentVector::new(to.clone(), v.as_slice()))
    }

    /// Box in coordinates used to integrate over the window, plus the
    /// map from box coordinates to points and the volume density.
    fn integration_box(&self, window: &Window) -> Result<(Vec<f64>, Vec<f64>)> {
        match (self.manifold, window) {
            (Manifold::Euclidean(d), Window::Box { lo, hi }) => {
                if lo.len() != d || hi.len() != d || lo.iter().zip(hi).any(|(a, b)| a > b) {
                    return Err(Error::InvalidArgument("malformed window box".into()));
                }
                Ok((lo.clone(), hi.clone()))
            }
            (Manifold::Euclidean(d), Window::All) => match &self.intensity {
                Intensity::Gaussian { scale } => {
                    let l = GAUSS_TRUNCATION * scale;
                    Ok((vec![-l; d], vec![l; d]))
                }
                Intensity::Uniform => Err(Error::Divergence),
                Intensity::Custom(c) => c.effective_box().ok_or(Error::Divergence),
            },
            (Manifold::Sphere2, Window::All) => Ok((vec![-1.0, 0.0], vec![1.0, 2.0 * PI])),
            (Manifold::Sphere2, Window::Box { .. }) => {
                Err(Error::Unsupported("coordinate boxes on the sphere".into()))
            }
        }
    }

    fn box_point(&self, u: &[f64]) -> Point {
        match self.manifold {
            Manifold::Euclidean(_) => Point::new(u),
            Manifold::Sphere2 => {
                let r = (1.0 - u[0] * u[0]).max(0.0).sqrt();
                Point::new(&[r * u[1].cos(), r * u[1].sin(), u[0]])
            }
        }
    }

    /// Quadrature nodes for `σ` restricted to the window; weights include `ρ`.
    pub fn sigma_nodes(&self, window: &Window, n: usize) -> Result<Vec<(Point, f64)>> {
        let (lo, hi) = self.integration_box(window)?;
        let mut out = Vec::new();
        quadrature::for_each_node(&lo, &hi, n, |u, w| {
            let p = self.box_point(u);
            let rho = self.rho(&p.coords);
            out.push((p, w * rho));
        });
        Ok(out)
    }

    /// `∫_Λ f dσ` by adaptive tensor Gauss–Legendre.
    pub fn integrate(&self, window: &Window, rtol: f64, f: impl Fn(&Point) -> f64) -> Result<f64> {
        let (lo, hi) = self.integration_box(window)?;
        quadrature::integrate_box_adaptive(&lo, &hi, 64, rtol, |u| {
            let p = self.box_point(u);
            f(&p) * self.rho(&p.coords)
        })
    }

    pub fn sigma_mass(&self, window: &Window) -> Result<f64> {
        if let Window::Box { lo, hi } = window {
            if lo.iter().zip(hi).any(|(a, b)| a == b) {
                return Ok(0.0);
            }
        }
        self.integrate(window, 1e-10, |_| 1.0)
    }

    /// Upper bound of `ρ` on a coordinate box (Euclidean only).
    pub(crate) fn rho_max_on_box(&self, lo: &[f64], hi: &[f64]) -> f64 {
        match &self.intensity {
            Intensity::Gaussian { .. } => {
                let nearest: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0f64.clamp(*a, *b)).collect();
                self.rho(&nearest)
            }
            Intensity::Uniform => 1.0,
            Intensity::Custom(c) => c.rho_max(lo, hi),
        }
    }
}
