pub mod analysis;
pub mod config;
pub mod env;
pub mod error;
pub mod grpo;
pub mod metrics;
pub mod policy;
pub mod redirection;
pub mod rng;
pub mod rundir;
pub mod scheduler;
pub mod transcript;

pub use error::{Error, Result};
