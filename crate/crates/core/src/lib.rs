//! Simulation and analysis of heralded photon pairs from an atomic-ensemble
//! source: an exact click-statistics engine, a seeded Monte Carlo event
//! generator, a streaming coincidence correlator and a global model fitter.

pub mod cli;
pub mod correlator;
pub mod error;
pub mod event_sim;
pub mod kv;
pub mod model_fit;
pub mod params;
pub mod photon_model;

pub use error::{Error, Result};
pub use params::{ChannelModel, DetectionConfig, DetectionMode, ModelParams};
pub use photon_model::{brute_force_statistics, click_statistics, derived_metrics, tmss_pgf, Metrics, Statistics};
