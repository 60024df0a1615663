//! Autonomous ultrasound probe navigation on a simulated phantom.

pub mod config;
pub mod datakit;
pub mod env;
pub mod error;
pub mod explain;
pub mod frame;
pub mod generative;
pub mod metrics;
pub mod netcheck;
pub mod phantom;
pub mod ppo;
pub mod quality;

pub use error::{Result, SonoError};
pub use frame::Frame;
