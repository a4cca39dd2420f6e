//! Budgeted sampling of test-set segments for human rating, and low-variance
//! unbiased estimates of the full-test-set mean score.
//!
//! Segments carry a document id and a vector of automatic-metric scores.
//! Documents and metrics serve as side information: documents and metric
//! bins define strata for stratified sampling, and standardized metric
//! scores (or knn predictions from them) serve as control variates.

pub mod bounds;
pub mod control_variates;
pub mod dataio;
pub mod error;
pub mod features;
pub mod incremental;
pub mod knn;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod service;
pub mod simulation;
pub mod stats;
pub mod stratification;

pub use bounds::{BoundKind, BoundSpec};
pub use control_variates::CovarianceEstimator;
pub use error::{Error, Result};
pub use incremental::{Session, SessionStatus, Strategy};
pub use model::{
    baseline_variance, random_sample, sample_mean, Estimate, EstimateFlag, SampleDraw, ScoreDirection, Segment, TestSet,
};
pub use pipeline::{Strata, VariateChoice};
pub use rng::RandomStream;
pub use simulation::{Method, SimulationConfig};
pub use stratification::{Allocation, Partition};
