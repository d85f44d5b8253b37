pub mod cohort;
pub mod error;
pub mod evaluation;
pub mod hazards;
pub mod linalg;
pub mod mlmm;
pub mod model;
pub mod prediction;
pub mod transforms;

pub use error::{Error, Result};
