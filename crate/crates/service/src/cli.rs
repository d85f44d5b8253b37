//! `dynrisk` command line: simulate, fit, predict, evaluate, serve.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use dynrisk_core::cohort::{export_csv, generate_synthetic_cohort, ingest_dir, GeneratorKind, Preset, SynthConfig};
use dynrisk_core::evaluation::{auc_csv, calibration_csv, evaluate, plot_data, summary_csv, EVALUATION_DAYS};
use dynrisk_core::model::{ModelConfig, PredictOptions};
use dynrisk_core::prediction::{Pathway, DEFAULT_SIMULATIONS, DEFAULT_WINDOW};

use crate::api::{self, AppState};
use crate::bundle::ModelBundle;
use crate::error::ServiceError;
use crate::patient::PatientInput;
use crate::session::SessionStore;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dynrisk", version, about = "Dynamic event-risk prediction from daily biomarkers")]
pub struct Cli {
    /// Default root for cohorts, models, sessions and reports.
    #[arg(long, global = true, env = "CROWN_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PresetArg {
    Reference,
    Calibration,
    StrongCoupling,
    Balanced,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GeneratorArg {
    Retrospective,
    Prospective,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PathwayArg {
    Prospective,
    Retrospective,
}

impl From<PathwayArg> for Pathway {
    fn from(p: PathwayArg) -> Self {
        match p {
            PathwayArg::Prospective => Pathway::Prospective,
            PathwayArg::Retrospective => Pathway::Retrospective,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort (CSV files plus truth.json).
    Simulate {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = PresetArg::Balanced)]
        preset: PresetArg,
        #[arg(long, value_enum, default_value_t = GeneratorArg::Retrospective)]
        generator: GeneratorArg,
        /// Output directory [default: <data-dir>/cohort]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a model bundle from a cohort directory.
    Fit {
        /// Cohort directory [default: <data-dir>/cohort]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Bundle file [default: <data-dir>/model.json]
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON model configuration; omitted fields keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Predict for one patient given as JSON.
    Predict {
        /// Bundle file [default: <data-dir>/model.json]
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        patient: PathBuf,
        /// Conditioning day [default: last observed day]
        #[arg(long)]
        day: Option<u32>,
        #[arg(long, value_enum, default_value_t = PathwayArg::Retrospective)]
        pathway: PathwayArg,
        /// Local-likelihood window.
        #[arg(short = 'a', long = "window", default_value_t = DEFAULT_WINDOW)]
        window: usize,
        /// Monte-Carlo paths of the prospective pathway.
        #[arg(short = 'S', long = "simulations", default_value_t = DEFAULT_SIMULATIONS)]
        simulations: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Skip the trajectory fan.
        #[arg(long)]
        no_fan: bool,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validated calibration and discrimination reports.
    Evaluate {
        /// Cohort directory [default: <data-dir>/cohort]
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = EVALUATION_DAYS)]
        days: Vec<u32>,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [PathwayArg::Prospective, PathwayArg::Retrospective])]
        pathways: Vec<PathwayArg>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(short = 'S', long = "simulations", default_value_t = DEFAULT_SIMULATIONS)]
        simulations: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report directory [default: <cohort>/evaluation]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the HTTP API.
    Serve {
        /// Bundle file [default: <data-dir>/model.json]
        #[arg(long)]
        model: Option<PathBuf>,
        /// Session log directory [default: <data-dir>/sessions]
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

impl From<dynrisk_core::Error> for CliError {
    fn from(e: dynrisk_core::Error) -> Self {
        CliError::Service(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Service(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Service(e.into())
    }
}

fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::Usage(_) => EXIT_USAGE,
        CliError::Service(ServiceError::Core(e)) if e.is_numerical() => EXIT_NUMERICAL,
        CliError::Service(ServiceError::Core(dynrisk_core::Error::InvalidConfig(_))) => EXIT_USAGE,
        CliError::Service(_) => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve(explicit: Option<PathBuf>, root: &Option<PathBuf>, default: &str, flag: &str) -> Result<PathBuf, CliError> {
    explicit
        .or_else(|| root.as_ref().map(|r| r.join(default)))
        .ok_or_else(|| CliError::Usage(format!("pass --{flag} or set CROWN_DATA_DIR")))
}

fn read_config(path: Option<&Path>) -> Result<ModelConfig, CliError> {
    match path {
        None => Ok(ModelConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let root = cli.data_dir;
    match cli.command {
        Command::Simulate { n, seed, preset, generator, out } => {
            let out = resolve(out, &root, "cohort", "out")?;
            let preset = match preset {
                PresetArg::Reference => Preset::Reference,
                PresetArg::Calibration => Preset::Calibration,
                PresetArg::StrongCoupling => Preset::StrongCoupling,
                PresetArg::Balanced => Preset::Balanced,
            };
            let generator = match generator {
                GeneratorArg::Retrospective => GeneratorKind::Retrospective,
                GeneratorArg::Prospective => GeneratorKind::Prospective,
            };
            let config = SynthConfig::preset(preset, generator, n, seed);
            let (dataset, truth) = generate_synthetic_cohort(&config)?;
            export_csv(&dataset, &out)?;
            write_json(&out.join("truth.json"), &serde_json::json!({ "config": config, "truth": truth }))?;
            eprintln!("wrote {} patients to {}", dataset.len(), out.display());
        }
        Command::Fit { data, out, config } => {
            let data = resolve(data, &root, "cohort", "data")?;
            let out = resolve(out, &root, "model.json", "out")?;
            let config = read_config(config.as_deref())?;
            let dataset = ingest_dir(&data)?;
            let bundle = ModelBundle::fit(&dataset, &config)?;
            bundle.save(&out)?;
            eprintln!(
                "fit {} patients; converged: {}; wrote {}",
                bundle.metadata.n_patients,
                bundle.metadata.converged,
                out.display()
            );
        }
        Command::Predict { model, patient, day, pathway, window, simulations, seed, no_fan, out } => {
            let model = resolve(model, &root, "model.json", "model")?;
            let bundle = ModelBundle::load(&model)?;
            let input: PatientInput = serde_json::from_str(&std::fs::read_to_string(&patient)?)?;
            let record = input.to_record(bundle.schema())?;
            let day = day.unwrap_or_else(|| input.observations.last().map_or(0, |o| o.day));
            let options = PredictOptions { pathway: pathway.into(), simulations, window, seed, fan: !no_fan };
            let response = bundle.predict(&record, day, &options)?;
            match out {
                Some(path) => write_json(&path, &response)?,
                None => println!("{}", serde_json::to_string_pretty(&response)?),
            }
        }
        Command::Evaluate { data, days, pathways, folds, seed, simulations, config, out } => {
            let data = resolve(data, &root, "cohort", "data")?;
            let out = out.unwrap_or_else(|| data.join("evaluation"));
            let config = read_config(config.as_deref())?;
            let dataset = ingest_dir(&data)?;
            let pathways: Vec<Pathway> = pathways.into_iter().map(Pathway::from).collect();
            let options = PredictOptions { simulations, fan: false, ..PredictOptions::default() };
            let reports = evaluate(&dataset, &days, &pathways, folds, seed, &config, &options)?;
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("report.json"), &reports)?;
            write_json(&out.join("plot_data.json"), &plot_data(&reports))?;
            std::fs::write(out.join("summary.csv"), summary_csv(&reports)?)?;
            std::fs::write(out.join("calibration.csv"), calibration_csv(&reports)?)?;
            std::fs::write(out.join("auc.csv"), auc_csv(&reports)?)?;
            eprint!("{}", summary_csv(&reports)?);
            eprintln!("wrote reports to {}", out.display());
        }
        Command::Serve { model, sessions, addr } => {
            let model = resolve(model, &root, "model.json", "model")?;
            let sessions = resolve(sessions, &root, "sessions", "sessions")?;
            let bundle = ModelBundle::load(&model)?;
            let store = SessionStore::open(&sessions, bundle.schema().clone())?;
            let state = AppState::new(bundle, store);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(api::serve(state, addr))?;
        }
    }
    Ok(())
}
