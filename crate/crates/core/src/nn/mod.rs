//! Minimal fixed-graph neural toolkit.
//!
//! Activations are stored channel-major: a `C × M` [`Tensor`] holds one
//! row per channel and one column per point (or per sample, after pooling).
//! A batch of `B` clouds with `P` points each is laid out as `C × (B·P)`,
//! cloud `b` occupying columns `b·P .. (b+1)·P`. Every operation here is
//! written against that layout and comes with a hand-derived backward pass.

pub mod gradcheck;
mod ops;
mod optim;
mod tensor;

pub use ops::*;
pub use optim::{Adam, Param, ParamId, ParamStore};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the network can be instantiated with.
///
/// Production paths run in `f32`; `f64` exists so gradients can be checked
/// against finite differences.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Whether layers behave as during training or inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
