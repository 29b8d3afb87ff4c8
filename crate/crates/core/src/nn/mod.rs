//! Minimal CPU layer kit with hand-written backward passes.
//!
//! Activations are `(channels, height, width)` arrays for one sample; batches
//! are handled by running samples independently and summing gradients in a
//! fixed order, which keeps training bit-reproducible under any thread count.

mod adam;
mod layers;
mod params;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    concat_channels, maxpool2, maxpool2_backward, relu, relu_backward, softmax, split_channels,
    upsample2, upsample2_backward, Conv2d, Linear, PoolIndices,
};
pub use params::{Grads, Param, ParamId, ParamStore};

use ndarray::{Array, Dimension};

/// Numeric precision used for activations and gradients inside a forward or
/// backward pass. Parameters and optimizer state always stay in `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Full,
    /// Values are rounded through IEEE binary16 after every layer; values
    /// beyond the f16 range become infinite.
    Half,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f32) -> f32 {
        match self {
            Precision::Full => v,
            Precision::Half => half::f16::from_f32(v).to_f32(),
        }
    }

    pub fn apply<D: Dimension>(self, a: &mut Array<f32, D>) {
        if self == Precision::Half {
            a.mapv_inplace(|v| half::f16::from_f32(v).to_f32());
        }
    }

    pub fn applied<D: Dimension>(self, mut a: Array<f32, D>) -> Array<f32, D> {
        self.apply(&mut a);
        a
    }
}
