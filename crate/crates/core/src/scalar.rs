//! Scalar abstraction: every numeric kernel in this crate is generic over
//! the element type, instantiated as `f32` (compact) or `f64` (standard).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};

/// Element type of [`crate::Tensor4`] and of all layer arithmetic.
///
/// `f64` is the standard (verification) precision, `f32` the compact
/// (training) precision. Gradient checks always run in `f64`.
pub trait Scalar:
    Float + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Dtype code used by the RDT1 tensor file format.
    const DTYPE_CODE: u32;

    fn from_f64(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE_CODE: u32 = 1;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u32 = 2;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Numeric precision of a model or a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// 64-bit IEEE-754. Used by every verification suite.
    Standard,
    /// 32-bit IEEE-754. Default for training.
    Compact,
}

impl Precision {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(Precision::Standard),
            "compact" => Some(Precision::Compact),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Standard => "standard",
            Precision::Compact => "compact",
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
