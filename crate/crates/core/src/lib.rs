//! Preference-based self-distillation on small, exactly enumerable policies.

pub mod cli_io;
pub mod error;
pub mod information;
pub mod losses;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod trainer;

pub use error::{LabError, Result};
pub use scalar::Scalar;

pub type Params = policy::PolicyParams<f64>;
pub type Params32 = policy::PolicyParams<f32>;
pub type Tilted = oracle::TiltedTarget<f64>;
pub type Info = information::InfoMatrix<f64>;
pub type Pair = losses::PreferencePair<f64>;
