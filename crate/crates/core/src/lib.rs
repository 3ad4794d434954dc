pub mod cli;
pub mod datastore;
pub mod error;
pub mod evalheads;
pub mod metrics;
pub mod mil;
pub mod numerics;
pub mod parallel;
pub mod sampler;
pub mod screening;
pub mod survival;

pub use error::{Error, Result};
