//! Out-distribution aware self-training on a synthetic open world.
//!
//! A teacher trained with outlier exposure on a small labeled set and a
//! large unlabeled pool is calibrated, pseudo-labels the pool, selects
//! confident samples under precision and out-distribution thresholds, and
//! trains a student that stays uncertain on the rest of the pool. Because
//! the world is a known Gaussian mixture, every quantity can be checked
//! against the Bayes-optimal predictor.

pub mod calib;
pub mod data;
pub mod dedup;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod prob;
pub mod rng;
pub mod select;
pub mod synth;
pub mod train;

pub use calib::{fit_temperature, Calibration};
pub use data::{Features, LabeledSet, Role, UnlabeledSet};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentConfig, RunControl};
pub use model::ClassifierModel;
pub use prob::ProbVector;
pub use rng::RngSeed;
pub use synth::{World, WorldSpec};
pub use train::{Mode, TrainConfig};
