//! Parameterized layers: grouped convolution, batch norm, dense (optionally
//! binarized) and the ReLU family.

mod activation;
mod conv;
mod dense;
mod norm;
mod param;

pub use activation::{
    lrelu_forward, prelu_forward, relu_forward, sigmoid_forward, ActivationLayer,
};
pub use conv::Conv2dLayer;
pub use dense::DenseLayer;
pub use norm::BatchNormLayer;
pub use param::{Param, ParamBuilder, ParamKind};

use crate::tensor::{BatchStats, TensorError};

/// Negative slope used by LReLU and as the PReLU initial value.
pub const DEFAULT_NEGATIVE_SLOPE: f32 = 0.3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dense layer is already binarized")]
    AlreadyBinarized,
    #[error("invalid layer configuration: {0}")]
    Config(String),
}

/// Per-forward bookkeeping shared by every layer of a model.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    pub train: bool,
    /// Batch statistics from training-mode batch norms, keyed by the id of
    /// the layer's scale parameter.
    pub bn_stats: Vec<(usize, BatchStats)>,
}

impl ForwardCtx {
    pub fn train() -> Self {
        Self {
            train: true,
            bn_stats: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}
