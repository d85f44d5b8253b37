//! Model bundles, durable patient sessions, the HTTP API and the `dynrisk` CLI.

pub mod api;
pub mod bundle;
pub mod cli;
pub mod error;
pub mod patient;
pub mod session;

pub use bundle::{dataset_hash, ModelBundle, PredictionResponse};
pub use error::{ServiceError, ServiceResult};
pub use patient::{ObservationInput, PatientInput};
pub use session::SessionStore;
