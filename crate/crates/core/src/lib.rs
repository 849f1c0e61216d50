pub mod detector;
pub mod dglosses;
mod error;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod toydata;
pub mod trainer;
pub mod types;

pub use error::{Error, Result, Violation};
pub use types::*;
