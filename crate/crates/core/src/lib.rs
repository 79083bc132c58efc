//! Image-goal navigation laboratory.
//!
//! Procedural raycast worlds, four goal/observation fusion encoders on a
//! shared residual backbone, a recurrent actor-critic trained with PPO, and
//! SR/SPL evaluation with activation-map export.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod imaging;
pub mod keypoints;
pub mod model;
pub mod numerics;
pub mod par;
pub mod policy;
pub mod trainer;
pub mod worldsim;

pub use error::{Error, Result};
