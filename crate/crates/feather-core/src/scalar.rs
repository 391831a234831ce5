//! Floating-point abstraction and the shared numeric kernels.
//!
//! The whole engine is generic over [`Scalar`] so the same code runs at
//! 32-bit (training, benchmarks) and 64-bit (gradient verification). The
//! precision is picked at runtime from config; see [`Precision`].
//!
//! The activation helpers here are the single source of truth: both the
//! gradient tape and the plain inference kernels call them, so the two
//! paths agree to the last bit at equal precision.

use serde::{Deserialize, Serialize};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Runtime precision switch carried in configs and bundle manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

/// Floating-point element type of tensors, tapes and kernels.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + 'static
{
    const PRECISION: Precision;
    const BYTE_WIDTH: usize;

    fn from_f64c(x: f64) -> Self;
    fn to_f64c(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Raw bit pattern, for bit-exactness assertions.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTE_WIDTH: usize = 4;

    fn from_f64c(x: f64) -> Self {
        x as f32
    }
    fn to_f64c(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTE_WIDTH: usize = 8;

    fn from_f64c(x: f64) -> Self {
        x
    }
    fn to_f64c(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Overflow-safe softplus ln(1 + e^x), strictly positive for finite x.
///
/// For large x the identity softplus(x) = x + ln(1 + e^-x) collapses to x
/// within machine precision, so we branch instead of overflowing exp.
/// For very negative x the result would underflow to zero; it is floored
/// at the smallest positive value so the positivity contract holds.
pub fn softplus<F: Scalar>(x: F) -> F {
    let threshold = F::from_f64c(30.0);
    let y = if x > threshold { x } else { x.exp().ln_1p() };
    if y == F::zero() {
        F::min_positive_value()
    } else {
        y
    }
}

/// Derivative of softplus: the logistic sigmoid.
pub fn softplus_grad<F: Scalar>(x: F) -> F {
    sigmoid(x)
}

/// Inverse softplus: the pre-activation that softplus maps to `y`.
///
/// Used to turn target initial values (e.g. step size 1.0, width 10.0)
/// into additive biases on the attention intermediates.
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1), rewritten as y + ln(1 - e^-y) to stay finite for large y.
    y + (-(-y).exp()).ln_1p()
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Max-subtracted softmax over a slice, in place. Output sums to 1.
pub fn softmax_in_place<F: Scalar>(xs: &mut [F]) {
    let mut max = F::neg_infinity();
    for &x in xs.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = F::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / sum;
    }
}

/// Unnormalized Gaussian bump exp(-(pos - mu)^2 / (2 sigma^2)).
///
/// Floored at the smallest positive value so emitted alignment weights
/// stay strictly positive even at extreme distances.
pub fn gaussian_weight<F: Scalar>(pos: F, mu: F, sigma: F) -> F {
    let diff = pos - mu;
    let two = F::from_f64c(2.0);
    let w = (-(diff * diff) / (two * sigma * sigma)).exp();
    if w == F::zero() {
        F::min_positive_value()
    } else {
        w
    }
}
