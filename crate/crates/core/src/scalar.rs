//! Floating-point element type used throughout the tape and the models.
//!
//! `f64` is the verification dtype (finite-difference gradient checks are
//! meaningless at single precision); `f32` is allowed for faster training.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};

/// On-disk element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Tensor element: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float + Send + Sync + Debug + Display + std::str::FromStr + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Little-endian serialisation; paired with [`Scalar::read_le`] it is
    /// bitwise exact.
    fn write_le<W: Write>(self, w: &mut W) -> std::io::Result<()>;
    fn read_le<R: Read>(r: &mut R) -> std::io::Result<Self>;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $bytes:expr) => {
        impl Scalar for $t {
            const DTYPE: Dtype = $dtype;

            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn write_le<W: Write>(self, w: &mut W) -> std::io::Result<()> {
                w.write_all(&self.to_le_bytes())
            }
            fn read_le<R: Read>(r: &mut R) -> std::io::Result<Self> {
                let mut buf = [0u8; $bytes];
                r.read_exact(&mut buf)?;
                Ok(<$t>::from_le_bytes(buf))
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32, 4);
impl_scalar!(f64, Dtype::F64, 8);

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        let e = (-x).exp();
        T::one() / (T::one() + e)
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Scale of the self-normalising exponential linear unit.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// Negative-branch coefficient of selu.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// selu(x) = lambda * x for x > 0, lambda * alpha * (exp(x) - 1) otherwise.
pub fn selu<T: Scalar>(x: T) -> T {
    let lambda = T::from_f64(SELU_LAMBDA);
    if x > T::zero() {
        lambda * x
    } else {
        lambda * T::from_f64(SELU_ALPHA) * (x.exp() - T::one())
    }
}

/// d selu / dx, matching the forward branch split.
pub fn selu_grad<T: Scalar>(x: T) -> T {
    let lambda = T::from_f64(SELU_LAMBDA);
    if x > T::zero() {
        lambda
    } else {
        lambda * T::from_f64(SELU_ALPHA) * x.exp()
    }
}
