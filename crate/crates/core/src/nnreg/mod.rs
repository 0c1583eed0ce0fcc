//! A small CNN regression engine with analytic gradients: tensors, layers,
//! single-view / dual-view / ensemble regressors, optimizers and
//! checkpoints.

mod checkpoint;
mod layers;
mod model;
mod optim;
mod scalar;
mod tensor;

use thiserror::Error;

pub use checkpoint::{config_hash, Checkpoint, NamedTensor};
pub use layers::{
    BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Layer, LayerSpec, Linear, MaxPool2d, Param, Relu,
    BN_EPS, BN_MOMENTUM,
};
pub use model::{
    build_conv_block_cnn, build_dual_cnn, build_six_layer_cnn, ensemble_predict, mse_loss, ArchitectureRegistry,
    BackboneBuilder, BackboneSpec, HeadInput, Model, ModelInput, ModelSpec, Sequential, Variant,
    SIX_LAYER_CNN,
};
pub use optim::{Optimizer, OptimizerKind};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor4;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("batch normalization needs at least 2 values per channel in training mode, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("dual branches produce different feature lengths: frontal {frontal}, lateral {lateral}")]
    BranchMismatch { frontal: usize, lateral: usize },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
}
