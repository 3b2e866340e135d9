//! The DAMP network: coarse encoder/decoder with a domain-confusion head,
//! fine utterance/sketch encoders and decoder with a domain-discrimination
//! head, prior attention over the utterance, and input switching between
//! sketch encodings and token embeddings.

mod losses;
mod network;
mod prepare;

pub use losses::{
    confusion_loss, discrimination_loss, Adv, BatchLosses, LossBreakdown, LossMode,
};
pub use network::{AttnCfg, DecStateV, EncoderRun, InferStage, Model, StepOutput};
pub use prepare::{prepare_instance, InputSrc, Prepared};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Sketch(#[from] crate::sketchlang::SketchError),
    #[error(transparent)]
    Relevance(#[from] crate::relevance::RelevanceError),
    #[error("instance is missing a prepared sketch or alignment")]
    MissingPreparation,
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, ModelError>;
