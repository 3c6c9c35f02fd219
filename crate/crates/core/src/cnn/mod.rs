//! Convolutional classifier: layer primitives, the canonical network,
//! SGD training, finite-difference gradient checks and a weights file format.

mod gemm;
mod gradcheck;
mod network;
mod ops;
mod train;
mod weights;

use std::fmt;

use thiserror::Error;

use crate::tensor::TensorError;

pub use gemm::{dot, gemm_nn, gemm_nt, gemm_tn};
pub use gradcheck::{grad_check, layer_grad_check, relative_error, GradCheckOptions, GradCheckReport, LayerKind, ParamCoord};
pub use network::{argmax_rows, Architecture, LayerParams, LayerSpec, Network, Preset};
pub use ops::{
    conv2d, conv2d_backward, cross_entropy, cross_entropy_grad, dense, dense_backward, maxpool2, maxpool2_backward,
    one_hot, one_hot_index, relu, relu_backward, softmax, softmax_backward, PROB_FLOOR,
};
pub(crate) use ops::softmax_row;
pub use train::{backprop, evaluate, train_epoch, Gradients, TrainConfig, TrainingData};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("{context}: shape {left:?} incompatible with {right:?}")]
    Shape {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<CnnError>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("non-finite loss in batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("weights file at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CnnError {
    pub(crate) fn layer(layer: usize, source: CnnError) -> Self {
        CnnError::Layer {
            layer,
            source: Box::new(source),
        }
    }
}

/// Which kind of parameter a coordinate refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
        })
    }
}
