//! Scalar abstraction and forward-mode dual numbers.
//!
//! Everything numeric in this crate is generic over [`Real`] (`f32` or `f64`).
//! Expression evaluation is additionally generic over [`Numeric`], which both
//! the reals and [`Dual`] implement, so directional derivatives come from the
//! same evaluator that produces plain values. Duals nest: `Dual<Dual<f64>>`
//! yields exact second derivatives, which the chart-transition pushforward
//! relies on.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Operations the expression evaluator needs from a scalar.
///
/// Implemented by `f32`, `f64` and by `Dual<S>` for any implementor `S`.
/// All methods are total with IEEE semantics; domain checking happens in the
/// evaluator, which inspects [`Numeric::re`] before applying a function.
pub trait Numeric<R>:
    Copy
    + fmt::Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Lift a real constant (derivative parts are zero).
    fn from_real(r: R) -> Self;
    /// The innermost real value, ignoring all derivative parts.
    fn re(self) -> R;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn atan(self) -> Self;
    fn atan2(self, other: Self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, e: Self) -> Self;
}

/// Floating-point scalar the whole toolkit is generic over.
pub trait Real:
    Numeric<Self>
    + RealField
    + FromPrimitive
    + ToPrimitive
    + Copy
    + Default
    + fmt::Display
    + fmt::LowerExp
    + Send
    + Sync
    + 'static
{
    /// Shorthand for `from_f64` of tolerance-sized constants.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in every Real type")
    }

    /// Lossy widening/narrowing to `f64` (exact for `f64` itself).
    fn as_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Numeric<$t> for $t {
            #[inline]
            fn from_real(r: $t) -> Self {
                r
            }
            #[inline]
            fn re(self) -> $t {
                self
            }
            #[inline]
            fn sin(self) -> Self {
                <$t>::sin(self)
            }
            #[inline]
            fn cos(self) -> Self {
                <$t>::cos(self)
            }
            #[inline]
            fn tan(self) -> Self {
                <$t>::tan(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn atan(self) -> Self {
                <$t>::atan(self)
            }
            #[inline]
            fn atan2(self, other: Self) -> Self {
                <$t>::atan2(self, other)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
            #[inline]
            fn powf(self, e: Self) -> Self {
                <$t>::powf(self, e)
            }
        }
        impl Real for $t {
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Modulus of a complex number over any [`Real`].
#[inline]
pub fn cmod<R: Real>(z: &nalgebra::Complex<R>) -> R {
    Numeric::sqrt(z.re * z.re + z.im * z.im)
}

/// Principal complex logarithm over any [`Real`].
#[inline]
pub fn cln<R: Real>(z: &nalgebra::Complex<R>) -> nalgebra::Complex<R> {
    nalgebra::Complex::new(Numeric::ln(cmod(z)), Numeric::atan2(z.im, z.re))
}

/// Value together with a directional derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<S> {
    pub val: S,
    pub dot: S,
}

impl<S> Dual<S> {
    #[inline]
    pub fn new(val: S, dot: S) -> Self {
        Dual { val, dot }
    }
}

impl<S: Copy + Add<Output = S>> Add for Dual<S> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Dual {
            val: self.val + rhs.val,
            dot: self.dot + rhs.dot,
        }
    }
}

impl<S: Copy + Sub<Output = S>> Sub for Dual<S> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Dual {
            val: self.val - rhs.val,
            dot: self.dot - rhs.dot,
        }
    }
}

impl<S: Copy + Neg<Output = S>> Neg for Dual<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual {
            val: -self.val,
            dot: -self.dot,
        }
    }
}

impl<S: Copy + Add<Output = S> + Mul<Output = S>> Mul for Dual<S> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        Dual {
            val: self.val * rhs.val,
            dot: self.dot * rhs.val + self.val * rhs.dot,
        }
    }
}

impl<S: Copy + Sub<Output = S> + Mul<Output = S> + Div<Output = S>> Div for Dual<S> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        // (a/b)' = (a'b - ab') / b^2
        Dual {
            val: self.val / rhs.val,
            dot: (self.dot * rhs.val - self.val * rhs.dot) / (rhs.val * rhs.val),
        }
    }
}

impl<R: Real, S: Numeric<R>> Numeric<R> for Dual<S> {
    #[inline]
    fn from_real(r: R) -> Self {
        Dual {
            val: S::from_real(r),
            dot: S::from_real(R::zero()),
        }
    }

    #[inline]
    fn re(self) -> R {
        self.val.re()
    }

    fn sin(self) -> Self {
        Dual {
            val: self.val.sin(),
            dot: self.dot * self.val.cos(),
        }
    }

    fn cos(self) -> Self {
        Dual {
            val: self.val.cos(),
            dot: -(self.dot * self.val.sin()),
        }
    }

    fn tan(self) -> Self {
        let t = self.val.tan();
        Dual {
            val: t,
            dot: self.dot * (S::from_real(R::one()) + t * t),
        }
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        Dual {
            val: e,
            dot: self.dot * e,
        }
    }

    fn ln(self) -> Self {
        Dual {
            val: self.val.ln(),
            dot: self.dot / self.val,
        }
    }

    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        let two = S::from_real(R::one() + R::one());
        Dual {
            val: s,
            dot: self.dot / (two * s),
        }
    }

    fn atan(self) -> Self {
        Dual {
            val: self.val.atan(),
            dot: self.dot / (S::from_real(R::one()) + self.val * self.val),
        }
    }

    fn atan2(self, other: Self) -> Self {
        // d atan2(y, x) = (y'x - yx') / (x^2 + y^2)
        let denom = other.val * other.val + self.val * self.val;
        Dual {
            val: self.val.atan2(other.val),
            dot: (self.dot * other.val - self.val * other.dot) / denom,
        }
    }

    fn abs(self) -> Self {
        // convention: derivative 0 at the kink
        let r = self.val.re();
        if r > R::zero() {
            self
        } else if r < R::zero() {
            -self
        } else {
            Dual {
                val: self.val.abs(),
                dot: S::from_real(R::zero()),
            }
        }
    }

    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Dual {
                val: S::from_real(R::one()),
                dot: S::from_real(R::zero()),
            };
        }
        let factor = S::from_real(R::from_i32(n).expect("small exponent"));
        Dual {
            val: self.val.powi(n),
            dot: factor * self.val.powi(n - 1) * self.dot,
        }
    }

    fn powf(self, e: Self) -> Self {
        // a^b with a > 0 guarded by the evaluator:
        // d(a^b) = a^b (b' ln a + b a'/a)
        let val = self.val.powf(e.val);
        Dual {
            val,
            dot: val * (e.dot * self.val.ln() + e.val * self.dot / self.val),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_product_law() {
        // (a,a')(b,b') = (ab, a'b + ab')
        let a = Dual::new(3.0, 2.0);
        let b = Dual::new(-1.5, 4.0);
        let p = a * b;
        assert_eq!(p.val, -4.5);
        assert_eq!(p.dot, 2.0 * -1.5 + 3.0 * 4.0);
    }

    #[test]
    fn dual_quotient_law() {
        let a = Dual::new(1.0, 1.0);
        let b = Dual::new(2.0, -3.0);
        let q = a / b;
        assert_eq!(q.val, 0.5);
        assert!((q.dot - (1.0 * 2.0 - 1.0 * -3.0) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn dual_chain_rules() {
        let x = Dual::new(0.7_f64, 1.0);
        assert!((x.sin().dot - 0.7f64.cos()).abs() < 1e-15);
        assert!((x.exp().dot - 0.7f64.exp()).abs() < 1e-15);
        assert!((x.ln().dot - 1.0 / 0.7).abs() < 1e-15);
        assert!((x.sqrt().dot - 0.5 / 0.7f64.sqrt()).abs() < 1e-15);
        assert!((x.tan().dot - 1.0 / 0.7f64.cos().powi(2)).abs() < 1e-12);
        assert!((x.atan().dot - 1.0 / (1.0 + 0.49)).abs() < 1e-15);
        assert!((x.powi(3).dot - 3.0 * 0.49).abs() < 1e-15);
    }

    #[test]
    fn dual_atan2() {
        let y = Dual::new(1.0_f64, 1.0);
        let x = Dual::new(2.0_f64, 0.0);
        let a = y.atan2(x);
        assert!((a.val - (0.5_f64).atan()).abs() < 1e-15);
        assert!((a.dot - 2.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn nested_duals_give_second_derivative() {
        // f(x) = x^3: f''(2) = 12, via Dual<Dual<f64>>
        let x: Dual<Dual<f64>> = Dual::new(Dual::new(2.0, 1.0), Dual::new(1.0, 0.0));
        let y = x * x * x;
        assert!((y.val.val - 8.0).abs() < 1e-15);
        assert!((y.val.dot - 12.0).abs() < 1e-15); // f'
        assert!((y.dot.dot - 12.0).abs() < 1e-15); // f''
    }
}
