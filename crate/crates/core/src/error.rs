use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("clip too short: {samples} samples, need at least {needed}")]
    ClipTooShort { samples: usize, needed: usize },

    #[error("invalid clip {clip_id}: {reason}")]
    InvalidClip { clip_id: String, reason: String },

    #[error("invalid task spec {task_id}: {reason}")]
    InvalidTaskSpec { task_id: String, reason: String },

    #[error("split has no clips: {0}")]
    EmptySplit(PathBuf),

    #[error("bad wav files:\n{}", .0.iter().map(|(p, e)| format!("  {}: {e}", p.display())).collect::<Vec<_>>().join("\n"))]
    BadWavFiles(Vec<(PathBuf, String)>),

    #[error("too few frames for subsampling: {0} (need at least 4)")]
    TooFewFrames(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing cached activations for backward pass")]
    MissingActivations,

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("mask plan exceeds cap: expected masked fraction {expected:.3} > {cap}")]
    MaskPlanExceedsCap { expected: f64, cap: f64 },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config fingerprint mismatch: checkpoint has {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("embedding store: {0}")]
    Store(String),

    #[error("class {0:?} is absent from the training split")]
    MissingClass(String),

    #[error("covariance is singular; use lda shrinkage > 0")]
    SingularCovariance,

    #[error("metric: {0}")]
    Metric(String),

    #[error("task {task}: missing split {split}")]
    MissingSplit { task: String, split: String },

    #[error("attention rows are not normalized (max deviation {0:.2e})")]
    UnnormalizedAttention(f64),

    #[error("{0}")]
    Invalid(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}
