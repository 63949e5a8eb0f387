//! Small from-scratch CNN used as the pretext learner and, once trained, as a
//! frozen feature extractor.

mod io;
pub mod layers;
mod network;
mod tensor;
mod train;

use thiserror::Error;

pub use io::{decode_params, encode_params, load_params, save_params};
pub use network::{
    argmax, batch_from_rasters, batch_loss, extract_embedding, extract_embeddings, forward,
    loss_and_grad, raster_to_input, BatchResult, ConvParams, InitRecord, NetworkParams,
    NetworkSpec,
};
pub use tensor::{Scalar, Tensor};
pub use train::{
    pretext_accuracy, train_classifier, train_pretext, train_pretext_with, EpochLog, Optimizer,
    OptimizerKind, TrainConfig, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training examples")]
    EmptyDataset,
    #[error("loss became non-finite in epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("bad parameter file: {0}")]
    BadParamFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes the per-epoch training log as CSV `epoch,loss,accuracy`.
pub fn write_train_log(path: &std::path::Path, log: &[EpochLog]) -> std::io::Result<()> {
    let mut out = String::from("epoch,loss,accuracy\n");
    for e in log {
        out.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.loss, e.accuracy));
    }
    std::fs::write(path, out)
}
