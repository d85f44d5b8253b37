use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use dynrisk_core::cohort::{CohortDataset, CohortSchema, PatientRecord};
use dynrisk_core::model::{FittedModel, ModelConfig, PredictOptions};
use dynrisk_core::prediction::{Pathway, Prediction};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ServiceError, ServiceResult};

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    /// SHA-256 of the training cohort's canonical JSON.
    pub dataset_hash: String,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` overrides the clock.
    pub created_unix: u64,
    pub n_patients: usize,
    pub schema: CohortSchema,
    pub converged: bool,
    pub software_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub metadata: BundleMetadata,
    pub model: FittedModel,
}

pub fn dataset_hash(dataset: &CohortDataset) -> String {
    let bytes = serde_json::to_vec(dataset).expect("dataset serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
}

/// Prediction document returned by the API and the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub patient: String,
    pub day: u32,
    pub pathway: Pathway,
    /// Local-likelihood window.
    pub a: usize,
    /// Monte-Carlo paths.
    #[serde(rename = "S")]
    pub simulations: usize,
    pub seed: u64,
    pub prediction: Prediction,
}

impl ModelBundle {
    /// Fits every component of both pathways on one cohort.
    pub fn fit(dataset: &CohortDataset, config: &ModelConfig) -> ServiceResult<Self> {
        let model = FittedModel::fit_all(dataset, config)?;
        Ok(Self {
            version: BUNDLE_VERSION,
            metadata: BundleMetadata {
                dataset_hash: dataset_hash(dataset),
                created_unix: timestamp(),
                n_patients: dataset.len(),
                schema: dataset.schema.clone(),
                converged: model.converged(),
                software_version: env!("CARGO_PKG_VERSION").to_string(),
            },
            model,
        })
    }

    pub fn save(&self, path: &Path) -> ServiceResult<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> ServiceResult<Self> {
        let bundle: ModelBundle = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if bundle.version != BUNDLE_VERSION {
            return Err(ServiceError::BundleVersion(bundle.version));
        }
        Ok(bundle)
    }

    /// Checks that `dataset` is the cohort the bundle was fit on.
    pub fn verify(&self, dataset: &CohortDataset) -> ServiceResult<()> {
        let actual = dataset_hash(dataset);
        if actual != self.metadata.dataset_hash {
            return Err(ServiceError::HashMismatch { expected: self.metadata.dataset_hash.clone(), actual });
        }
        Ok(())
    }

    pub fn schema(&self) -> &CohortSchema {
        &self.metadata.schema
    }

    pub fn predict(&self, patient: &PatientRecord, day: u32, options: &PredictOptions) -> ServiceResult<PredictionResponse> {
        let prediction = self.model.predict(patient, day, options)?;
        Ok(PredictionResponse {
            patient: patient.id.clone(),
            day,
            pathway: options.pathway,
            a: options.window,
            simulations: options.simulations,
            seed: options.seed,
            prediction,
        })
    }
}
