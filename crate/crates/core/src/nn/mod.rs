//! Layer toolkit for the segmentation network.
//!
//! Every layer exposes a stateless `forward` and a `backward` that consumes the
//! forward cache, accumulates parameter gradients into [`Param::grad`] and
//! returns the gradient with respect to the layer input. All layers are
//! generic over [`Real`] so the same code runs in `f32` for training and in
//! `f64` for finite-difference verification.

mod block;
mod conv;
mod norm;
mod param;
mod pool;
mod resample;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use block::{BlockCache, BlockKind, ConvBlock};
pub use conv::Conv2d;
pub use norm::{BatchNorm2d, NormCache};
pub(crate) use param::join;
pub use param::{Param, Parameterized};
pub use pool::{avg_pool2, avg_pool2_backward};
pub use resample::{resize_bilinear, resize_bilinear_backward, resize_nearest, AxisInterp};

/// Floating-point element type usable by every layer.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Whether normalization layers use batch statistics (and record them) or
/// their running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
