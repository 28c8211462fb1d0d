//! Float abstraction so the same graph code runs at f32 (training) and
//! f64 (gradient checking).

use num_traits::Float;

pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Default + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
