//! Elementwise nonlinearities and their derivatives.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::real::Real;

/// Elementwise activation function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    /// Exact form `x * Phi(x)` with the Gaussian CDF.
    Gelu,
    LeakyRelu(f64),
}

/// Negative slope used wherever a leaky ReLU is not configured otherwise.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Gelu => "gelu",
            Activation::LeakyRelu(_) => "leaky_relu",
        }
    }

    /// Saturating maps are clamped to their open range so gates never reach
    /// exactly 0 or 1.
    pub fn apply<T: Real>(&self, x: T) -> T {
        match *self {
            Activation::Tanh => {
                let b = T::below_one();
                x.tanh().max(-b).min(b)
            }
            Activation::Sigmoid => {
                let y = if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                };
                y.max(T::min_positive_value()).min(T::below_one())
            }
            Activation::Gelu => x * normal_cdf(x),
            Activation::LeakyRelu(slope) => {
                if x >= T::zero() {
                    x
                } else {
                    x * T::lit(slope)
                }
            }
        }
    }

    /// Derivative at `x`, given the forward value `y = apply(x)`.
    pub fn derivative<T: Real>(&self, x: T, y: T) -> T {
        match *self {
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Gelu => {
                let pdf = (-(x * x) / T::lit(2.0)).exp() / T::lit((2.0 * PI).sqrt());
                normal_cdf(x) + x * pdf
            }
            Activation::LeakyRelu(slope) => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::lit(slope)
                }
            }
        }
    }
}

/// Standard normal CDF via `erf`.
pub fn normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf())
}
