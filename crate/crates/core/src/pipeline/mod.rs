//! Stage-wise orchestration: each stage reads files written by earlier ones,
//! writes into a temporary directory, records a `run.json`, and is promoted
//! into place only when it completes.

mod config;
mod provenance;
mod run_all;
mod stages;

use thiserror::Error;

pub use config::{extractor_tag, parse_config_text, stage_seed, PretextPool, RunConfig, KEYS, SEED_ENV};
pub use provenance::{file_digest, StageWriter, VERSION};
pub use run_all::{run_all, RunSummary};
pub use stages::{
    cmd_aggregate, cmd_embed, cmd_eval, cmd_import_embeddings, cmd_pretext_gen, cmd_synth,
    cmd_tile, cmd_train_pretext, cmd_train_svm, cmd_tsne, load_patches, load_tiles,
    pretext_heldout_accuracy, SvmLevel,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{stage}: {message}")]
    Data { stage: String, message: String },
    #[error("{stage}: numerical failure: {message}")]
    Numerical { stage: String, message: String },
}

impl PipelineError {
    /// 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Data { .. } => 2,
            PipelineError::Numerical { .. } => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureKind {
    Usage,
    Data,
    Numerical,
}

/// Sorts module errors into the three exit-code classes.
pub trait Failure: std::fmt::Display {
    fn kind(&self) -> FailureKind {
        FailureKind::Data
    }
}

impl Failure for std::io::Error {}
impl Failure for csv::Error {}
impl Failure for serde_json::Error {}
impl Failure for crate::imagecore::ImageError {}

impl Failure for crate::pretext::PretextError {
    fn kind(&self) -> FailureKind {
        match self {
            crate::pretext::PretextError::BadFraction(_) | crate::pretext::PretextError::PoolTooSmall { .. } => {
                FailureKind::Usage
            }
            _ => FailureKind::Data,
        }
    }
}

impl Failure for crate::nnet::NnetError {
    fn kind(&self) -> FailureKind {
        use crate::nnet::NnetError::*;
        match self {
            DivergenceDetected { .. } => FailureKind::Numerical,
            InvalidSpec(_) | InvalidConfig(_) => FailureKind::Usage,
            _ => FailureKind::Data,
        }
    }
}

impl Failure for crate::embeddings::EmbeddingError {
    fn kind(&self) -> FailureKind {
        match self {
            crate::embeddings::EmbeddingError::NonFinite(_) => FailureKind::Numerical,
            _ => FailureKind::Data,
        }
    }
}

impl Failure for crate::classify::SvmError {
    fn kind(&self) -> FailureKind {
        use crate::classify::SvmError::*;
        match self {
            NonFinite | NoConvergence { .. } => FailureKind::Numerical,
            InvalidConfig(_) => FailureKind::Usage,
            _ => FailureKind::Data,
        }
    }
}

impl Failure for crate::projection::TsneError {
    fn kind(&self) -> FailureKind {
        use crate::projection::TsneError::*;
        match self {
            NonFiniteGradient(_) | DegenerateDistances => FailureKind::Numerical,
            InvalidConfig(_) => FailureKind::Usage,
            _ => FailureKind::Data,
        }
    }
}

impl Failure for crate::evaluation::EvalError {
    fn kind(&self) -> FailureKind {
        use crate::evaluation::EvalError::*;
        match self {
            Svm(e) => e.kind(),
            Embedding(e) => e.kind(),
            InvalidPlan(_) => FailureKind::Usage,
            _ => FailureKind::Data,
        }
    }
}

impl Failure for crate::synthgen::SynthError {
    fn kind(&self) -> FailureKind {
        match self {
            crate::synthgen::SynthError::InvalidConfig(_) => FailureKind::Usage,
            _ => FailureKind::Data,
        }
    }
}

/// Attaches a stage name to a module error.
pub trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T, PipelineError>;
}

impl<T, E: Failure> StageContext<T> for Result<T, E> {
    fn stage(self, stage: &str) -> Result<T, PipelineError> {
        self.map_err(|e| {
            let message = e.to_string();
            match e.kind() {
                FailureKind::Usage => PipelineError::Usage(format!("{stage}: {message}")),
                FailureKind::Data => PipelineError::Data {
                    stage: stage.to_string(),
                    message,
                },
                FailureKind::Numerical => PipelineError::Numerical {
                    stage: stage.to_string(),
                    message,
                },
            }
        })
    }
}

pub(crate) fn data_error(stage: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Data {
        stage: stage.to_string(),
        message: message.into(),
    }
}
