//! Scalar abstraction shared by the fp32 training path and fp64 checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the tape can differentiate through.
pub trait Real:
    num_traits::Float + num_traits::FloatConst + Debug + Display + Send + Sync + Sum + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}
