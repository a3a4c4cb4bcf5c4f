//! Minimal reverse-mode differentiable tensor engine.
//!
//! A [`Graph`] records a dynamic computation over 1-D/2-D [`Tensor`]s and
//! replays it backwards to accumulate gradients. There is no fusion, no
//! threading and no graph reuse: one graph per forward pass, dropped after
//! use. Model weights live in [`Parameter`]s (tensor + Adam state) and are
//! interned into a graph by name, so a weight used several times in one pass
//! receives one accumulated gradient.
//!
//! Training code instantiates the engine at `f32`; gradient-checking tests
//! instantiate it at `f64`.

mod adam;
mod gradcheck;
mod graph;
mod layers;

pub use adam::{accumulate_grads, Adam, OptimError, Parameter};
pub use gradcheck::{grad_check, grad_check_against, GradCheckError, GradCheckReport};
pub use graph::{Graph, NodeId, PoolMode};
pub use layers::{
    causal_mask, causal_padding_mask, key_padding_mask, sinusoidal_positions, AttentionWeights,
    BiGru, FeedForward, GruDirection, LayerError, LayerNormParams, Linear, MASKED_LOGIT,
};

use std::fmt::{Debug, Display};

/// Floating-point element type of the engine.
pub trait Scalar:
    num_like::FloatOps + Copy + PartialOrd + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

/// The arithmetic surface [`Scalar`] needs; kept in a private module so the
/// public trait stays a single opaque bound.
mod num_like {
    use std::iter::Sum;
    use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

    pub trait FloatOps:
        Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum
        + Sized
    {
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn tanh(self) -> Self;
        fn sqrt(self) -> Self;
        fn abs(self) -> Self;
        fn maximum(self, other: Self) -> Self;
        fn minimum(self, other: Self) -> Self;
        fn is_finite(self) -> bool;
        fn powi(self, n: i32) -> Self;
    }

    macro_rules! impl_float_ops {
        ($t:ty) => {
            impl FloatOps for $t {
                fn exp(self) -> Self {
                    self.exp()
                }
                fn ln(self) -> Self {
                    self.ln()
                }
                fn tanh(self) -> Self {
                    self.tanh()
                }
                fn sqrt(self) -> Self {
                    self.sqrt()
                }
                fn abs(self) -> Self {
                    self.abs()
                }
                fn maximum(self, other: Self) -> Self {
                    self.max(other)
                }
                fn minimum(self, other: Self) -> Self {
                    self.min(other)
                }
                fn is_finite(self) -> bool {
                    self.is_finite()
                }
                fn powi(self, n: i32) -> Self {
                    self.powi(n)
                }
            }
        };
    }
    impl_float_ops!(f32);
    impl_float_ops!(f64);
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Dense row-major tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    pub shape: Vec<usize>,
    pub values: Vec<F>,
    pub grad: Option<Vec<F>>,
    pub requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, values: Vec<F>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            values.len(),
            expected,
            "tensor shape {:?} expects {} values, got {}",
            shape,
            expected,
            values.len()
        );
        Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self::from_vec(shape, vec![F::zero(); n])
    }

    pub fn scalar(v: F) -> Self {
        Self::from_vec(vec![1], vec![v])
    }

    /// Uniform init in `[-a, a)` from a seeded stream.
    pub fn uniform(shape: Vec<usize>, a: f64, rng: &mut crate::rng::SeededRng) -> Self {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| F::from_f64(rng.f64_symmetric(a)))
            .collect();
        Self::from_vec(shape, values)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Row count: a rank-1 tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Lossy conversion between element types (used by checkpoint I/O).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor::from_vec(
            self.shape.clone(),
            self.values.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        )
    }
}
