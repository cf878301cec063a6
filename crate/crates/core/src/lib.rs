pub mod dataio;
pub mod error;
pub mod fixture;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod report;
pub mod rng;
pub mod sampling;
pub mod subspace;
pub mod trainer;

pub use error::{Error, Result};
