//! Anchored joint interaction prediction for two-agent driving scenes.
//!
//! The pipeline: scenes are rasterized into ego-centered images, a small
//! differentiable model predicts anchored marginal trajectories (control
//! points decoded through a cubic B-spline, residual to K-Means anchors)
//! plus a K x K joint-confidence grid formed by ensembling the two agents'
//! perspectives. Training uses a joint classification loss with marginal
//! supervision plus anchored regression, and loss weights can be set with
//! metric-loss sensitivity analysis.
//!
//! Start from the runnable examples (`cargo run --example ...`) or the
//! `airsq` binary, which wires the same library calls into subcommands.

pub mod anchors;
pub mod cli;
pub mod config;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod scenario;
pub mod spline;
pub mod synth;

pub use error::{Error, Result};
pub use scenario::{Agent, ObjectType, PastStates, Pose, Scenario, Trajectory, Vec2};
