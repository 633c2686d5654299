//! Spatio-temporal blinking-cluster models for photoactivated localization
//! microscopy.
//!
//! The crate simulates localization tables produced by photo-switchable
//! fluorophores under camera frame discretization, and estimates the kinetic
//! blinking rates from such tables by moment matching of second-order
//! spatial/temporal summary statistics. No model for the spatial organization
//! of the underlying proteins is required for estimation.
//!
//! Module map:
//!
//! - [`kinetics`]: continuous-time fluorophore traces and frame discretization.
//! - [`spatial_sim`]: protein layouts and full localization datasets.
//! - [`summaries`]: kernel estimators of pair/mark statistics and temporal statistics.
//! - [`moments`]: approximate theoretical moments of the discretized 4-state model.
//! - [`fit`]: the stepwise estimation pipeline.
//!
//! Data-parallel loops go through rayon when the `parallel` feature is enabled
//! (the default) and run sequentially otherwise. Every reduction uses a fixed
//! chunking, so results are bit-identical across thread counts and builds.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fit;
pub mod kinetics;
pub mod moments;
pub mod optimize;
pub mod par;
pub mod rng;
pub mod spatial_sim;
pub mod stats;
pub mod summaries;

pub use error::{Error, Result};
pub use kinetics::{BlinkCluster, BlinkModel, ContinuousTrace, DarkState, KineticRates, MultiDarkModel};
pub use spatial_sim::{Dataset, Localization, Window};
pub use summaries::Curve;
