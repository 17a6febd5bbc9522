//! Divide-and-conquer Bayesian regression with a separable spatio-temporal
//! Gaussian-process latent field.
//!
//! Locations are split into subsets, each subset is sampled with a powered
//! likelihood, subset posteriors are combined by a Wasserstein barycenter
//! approximation, and predictions are medians of per-subset kriging.

pub mod covariance;
pub mod data;
pub mod diagnostics;
pub mod dnc;
pub mod error;
pub mod predict;
pub mod rng;
pub mod sampler;

pub use covariance::{DecayGrid, GridTables, SpatialInverse};
pub use data::{
    build_design, simulate, SimulationConfig, SimulationTruth, TrueParams, load_dataset, partition_locations, CsvSchema, Dataset, DesignBundle, Location,
    Observation, Partition,
};
pub use diagnostics::{metrics, morans_i, MetricsReport, MoranResult};
pub use dnc::{fit_dnc, fit_dnc_with, fit_full, stack_v, wasp_combine, CombinedPosterior, DncFit, LatentEstimate, SubsetFit};
pub use error::{Error, Result};
pub use predict::{build_predictors, predict_batch, PredictMode, PredictionRecord, Query, SubsetPredictor};
pub use sampler::{Chain, McmcConfig, ModelVariant, Priors};
