//! Scalars that can carry two seeded first-order perturbations.
//!
//! Evaluating an expression with [`HyperDual`] arguments returns the value,
//! the two directional derivatives and the mixed second derivative, all exact
//! up to rounding. Plain `f64` takes the same code path with no overhead.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// A smooth function of several real variables with a closed-form jet.
pub trait Smooth {
    fn value(&self, x: &[f64]) -> f64;
    /// Value, gradient and row-major Hessian at `x`.
    fn jet(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>);
}

pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn cst(v: f64) -> Self;
    fn re(self) -> f64;
    fn scale(self, c: f64) -> Self;
    fn is_zero(self) -> bool;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn cos(self) -> Self;
    fn sin(self) -> Self;
    /// Compose a smooth function with scalar arguments (chain rule).
    fn lift<F: Smooth + ?Sized>(f: &F, args: &[Self]) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }
    fn one() -> Self {
        Self::cst(1.0)
    }
    fn powi(self, k: u32) -> Self {
        let mut acc = Self::one();
        for _ in 0..k {
            acc *= self;
        }
        acc
    }
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn re(self) -> f64 {
        self
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
    fn is_zero(self) -> bool {
        self == 0.0
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn lift<F: Smooth + ?Sized>(f: &F, args: &[Self]) -> Self {
        f.value(args)
    }
    fn powi(self, k: u32) -> Self {
        f64::powi(self, k as i32)
    }
}

/// `re + e1·ε1 + e2·ε2 + e12·ε1ε2` with `ε1² = ε2² = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct HyperDual {
    pub re: f64,
    pub e1: f64,
    pub e2: f64,
    pub e12: f64,
}

impl HyperDual {
    pub fn new(re: f64, e1: f64, e2: f64, e12: f64) -> Self {
        Self { re, e1, e2, e12 }
    }

    /// Apply a univariate function given its value and first two derivatives at `self.re`.
    fn unary(self, f: f64, df: f64, ddf: f64) -> Self {
        Self {
            re: f,
            e1: df * self.e1,
            e2: df * self.e2,
            e12: df * self.e12 + ddf * self.e1 * self.e2,
        }
    }
}

impl Add for HyperDual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.e1 + o.e1, self.e2 + o.e2, self.e12 + o.e12)
    }
}

impl Sub for HyperDual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.e1 - o.e1, self.e2 - o.e2, self.e12 - o.e12)
    }
}

impl Mul for HyperDual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.re * o.re,
            self.re * o.e1 + self.e1 * o.re,
            self.re * o.e2 + self.e2 * o.re,
            self.re * o.e12 + self.e1 * o.e2 + self.e2 * o.e1 + self.e12 * o.re,
        )
    }
}

impl Div for HyperDual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let r = 1.0 / o.re;
        self * o.unary(r, -r * r, 2.0 * r * r * r)
    }
}

impl Neg for HyperDual {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.re, -self.e1, -self.e2, -self.e12)
    }
}

impl AddAssign for HyperDual {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl SubAssign for HyperDual {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl MulAssign for HyperDual {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl Scalar for HyperDual {
    fn cst(v: f64) -> Self {
        Self::new(v, 0.0, 0.0, 0.0)
    }
    fn re(self) -> f64 {
        self.re
    }
    fn scale(self, c: f64) -> Self {
        Self::new(self.re * c, self.e1 * c, self.e2 * c, self.e12 * c)
    }
    fn is_zero(self) -> bool {
        self.re == 0.0 && self.e1 == 0.0 && self.e2 == 0.0 && self.e12 == 0.0
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.unary(s, 0.5 / s, -0.25 / (s * self.re))
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.unary(e, e, e)
    }
    fn cos(self) -> Self {
        let (s, c) = self.re.sin_cos();
        self.unary(c, -s, -c)
    }
    fn sin(self) -> Self {
        let (s, c) = self.re.sin_cos();
        self.unary(s, c, -s)
    }
    fn lift<F: Smooth + ?Sized>(f: &F, args: &[Self]) -> Self {
        let x: Vec<f64> = args.iter().map(|a| a.re).collect();
        let n = x.len();
        let (v, g, h) = f.jet(&x);
        let mut out = Self::cst(v);
        for i in 0..n {
            out.e1 += g[i] * args[i].e1;
            out.e2 += g[i] * args[i].e2;
            out.e12 += g[i] * args[i].e12;
            for j in 0..n {
                out.e12 += h[i * n + j] * args[i].e1 * args[j].e2;
            }
        }
        out
    }
}
