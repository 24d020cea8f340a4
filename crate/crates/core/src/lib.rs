//! Discrete choice modeling toolkit.
//!
//! The crate covers three layers:
//!
//! - classical choice models (MNL, Markov chain, nonparametric ranking) with exact
//!   probability engines, samplers and their estimators (MLE and EM);
//! - assortment-aware choice networks (gated and residual, with or without feature
//!   encoders) built on a small reverse-mode differentiation engine;
//! - synthetic data generators, real-data ingestion and evaluation metrics
//!   (cross-entropy, accuracy, adaptive calibration error, layer-effect analysis).
//!
//! Product indices are 0-based everywhere. A no-purchase option, when present, is an
//! ordinary product flagged in [`ProductUniverse`].

pub mod autodiff;
pub mod classical;
pub mod data;
pub mod datagen;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod ingest;
pub mod linalg;
pub mod neural;
pub mod rng;

pub use classical::{ChoiceModel, ClassicalModel, MccmModel, MnlModel, NpModel};
pub use data::{
    Assortment, ChoiceDataset, ChoiceObservation, FeatureTable, ProbVector, ProductUniverse,
};
pub use error::{Error, Result};
