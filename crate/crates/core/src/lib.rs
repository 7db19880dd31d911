//! Contextual-GAN lesion synthesis and removal for patch-level data
//! augmentation, with the evaluation machinery (AUC, DeLong, t-SNE) used to
//! measure whether the synthetic patches help a malignancy classifier.

pub mod classifier;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod gan;
pub mod lesion;
pub mod metrics;
pub mod nn;
pub mod patch;
pub mod phantom;
pub mod seed;
pub mod types;

pub use error::{Error, Result};
