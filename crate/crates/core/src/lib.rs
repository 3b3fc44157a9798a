pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod io;
mod linalg;
pub mod math;
pub mod model;
pub mod priors;
pub mod quadrature;
pub mod sampler;
pub mod simulation;
pub mod summary;

pub use error::{Error, ErrorCategory, Result};
