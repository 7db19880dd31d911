use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("lesion box {box_desc} lies outside a {width}x{height} canvas")]
    BoxOutOfBounds {
        box_desc: String,
        width: usize,
        height: usize,
    },

    #[error("no valid patch in image {image_id} after {attempts} attempts")]
    NoValidPatch { image_id: String, attempts: usize },

    #[error("image {0} has no lesion annotations")]
    NoAnnotations(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("data stream `{0}` exhausted")]
    StreamExhausted(String),

    #[error("non-finite {what} at step {step}{}", diagnostic.as_ref().map(|p| format!(" (diagnostic checkpoint: {})", p.display())).unwrap_or_default())]
    NonFinite {
        what: String,
        step: usize,
        diagnostic: Option<PathBuf>,
    },

    #[error("growth error: {0}")]
    Growth(String),

    #[error("synthesis failed after {attempts} attempts ({rejected} masks rejected)")]
    SynthesisFailure { attempts: usize, rejected: usize },

    #[error("no examples available for provenance={provenance} polarity={polarity}")]
    EmptyCell {
        provenance: String,
        polarity: String,
    },

    #[error("AUC undefined: need at least one positive and one negative example")]
    UndefinedAuc,

    #[error("paired score vectors differ in length ({0} vs {1})")]
    Unpaired(usize, usize),

    #[error("DeLong variance is degenerate (auc_a={auc_a}, auc_b={auc_b})")]
    DegenerateVariance { auc_a: f64, auc_b: f64 },

    #[error("perplexity {perplexity} infeasible for {n} points")]
    Perplexity { perplexity: f64, n: usize },

    #[error("missing ids: {0:?}")]
    MissingIds(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}\n  reproduce with: {command}")]
    Stage {
        stage: String,
        command: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Torch(#[from] tch::TchError),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failing stage.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation { .. } | Error::Json(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
