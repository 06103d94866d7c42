//! Multitask 6-DoF camera pose regression and visual odometry at desk scale.
//!
//! The crate implements, end to end and on the CPU in double precision:
//!
//! - a minimal reverse-mode autodiff engine over dense tensors ([`tensor`]);
//! - pose and quaternion algebra ([`geometry`]);
//! - the differentiable loss family for global pose regression and odometry,
//!   including the geometric consistency loss that penalizes predictions
//!   contradicting the true inter-frame motion ([`losses`]);
//! - a three-stream bottleneck-residual network with hard parameter sharing
//!   between the global localization stream and the odometry stream, plus
//!   previous-pose fusion ([`model`]);
//! - Adam and joint/alternating multitask training ([`optim`]);
//! - dataset ingestion, preprocessing and a deterministic synthetic world
//!   generator with an optional perceptual-aliasing regime ([`data`]);
//! - localization and odometry metrics with report emission ([`eval`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};

/// Schema/library version embedded in every emitted artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
