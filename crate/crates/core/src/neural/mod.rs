//! Minimal differentiable compute core.
//!
//! Two-dimensional `f64` tensors, a per-step reverse-mode [`Graph`], the
//! layers the scheduling model needs, and an adaptive-moment optimizer living
//! inside [`ParamStore`].

mod graph;
mod layers;
mod params;
mod tensor;

pub use graph::{clipped_surrogate, quantile_huber, Graph, NodeId};
pub use layers::{
    attention, attention_weights, GruCell, HeadProjections, LayerNorm, Linear, Mlp, MultiHeadAttention,
    LAYER_NORM_EPS,
};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

/// Widths shared by every network in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d_model: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(crate::Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(crate::Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_model: 64,
            heads: 4,
            hidden: 64,
        }
    }
}
