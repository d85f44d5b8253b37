mod common;

use std::path::Path;
use std::process::{Command, Output};

use dynrisk_service::cli::{EXIT_DATA, EXIT_OK, EXIT_USAGE};
use dynrisk_service::{ModelBundle, ObservationInput, PatientInput};
use serde_json::Value;

fn dynrisk(args: &[&str], data_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dynrisk"));
    cmd.args(args).env_remove("CROWN_DATA_DIR").env("SOURCE_DATE_EPOCH", "1700000000");
    if let Some(d) = data_dir {
        cmd.env("CROWN_DATA_DIR", d);
    }
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn simulate_fit_predict_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let m = tmp.path().join("m.json");
    let out = dynrisk(&["simulate", "--n", "200", "--seed", "7", "--out", d.to_str().unwrap()], None);
    assert_eq!(code(&out), EXIT_OK, "{}", stderr(&out));
    for f in ["schema.json", "patients.csv", "observations.csv", "truth.json"] {
        assert!(d.join(f).exists(), "{f}");
    }

    let out = dynrisk(&["fit", "--data", d.to_str().unwrap(), "--out", m.to_str().unwrap()], None);
    assert_eq!(code(&out), EXIT_OK, "{}", stderr(&out));
    let bundle = ModelBundle::load(&m).unwrap();
    assert!(bundle.metadata.converged);
    assert_eq!(bundle.metadata.created_unix, 1_700_000_000);
    let model = &bundle.model;
    assert!(model.prospective.as_ref().unwrap().mlmm.diagnostics.converged);
    assert!(model.retrospective.as_ref().unwrap().strata.iter().all(|f| f.diagnostics.converged));

    // a patient built from the simulated cohort's day-0 and day-1 values
    let ds = dynrisk_core::cohort::ingest_dir(&d).unwrap();
    let names = ds.schema.biomarker_names();
    let rec = ds.patients.iter().find(|p| p.outcome.at_risk_after(3) && p.value(0, 1).is_some()).unwrap();
    let obs = common::observation(rec, &names, 1).unwrap();
    let patient = PatientInput {
        id: rec.id.clone(),
        covariates: ds
            .schema
            .covariates
            .iter()
            .zip(&rec.covariates)
            .map(|(def, v)| (def.name.clone(), serde_json::to_value(v).unwrap()))
            .collect(),
        baseline: names.iter().cloned().zip(rec.baseline.iter().copied()).collect(),
        observations: vec![ObservationInput { day: 1, values: obs.values }],
    };
    let p = tmp.path().join("p.json");
    std::fs::write(&p, serde_json::to_vec(&patient).unwrap()).unwrap();
    let args = ["predict", "--model", m.to_str().unwrap(), "--patient", p.to_str().unwrap(), "--day", "1", "--pathway", "retrospective"];
    let out = dynrisk(&args, None);
    assert_eq!(code(&out), EXIT_OK, "{}", stderr(&out));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    let pred = &doc["prediction"];
    for key in ["prior", "likelihood", "posterior", "fan", "cumulative"] {
        assert!(!pred[key].is_null(), "{key}");
    }

    // defaults resolved from CROWN_DATA_DIR: <root>/model.json
    std::fs::copy(&m, tmp.path().join("model.json")).unwrap();
    let out = dynrisk(&["predict", "--patient", p.to_str().unwrap(), "--pathway", "prospective", "-S", "20"], Some(tmp.path()));
    assert_eq!(code(&out), EXIT_OK, "{}", stderr(&out));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["prediction"]["pathway"], "prospective");
    assert_eq!(doc["day"], 1);
}

#[test]
fn evaluate_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dynrisk(&["simulate", "--n", "300", "--seed", "3"], Some(tmp.path()));
    assert_eq!(code(&out), EXIT_OK, "{}", stderr(&out));
    let args = ["evaluate", "--days", "0,2", "--pathways", "retrospective", "--folds", "2"];
    let out = dynrisk(&args, Some(tmp.path()));
    assert_eq!(code(&out), EXIT_OK, "{}", stderr(&out));
    let dir = tmp.path().join("cohort").join("evaluation");
    for f in ["report.json", "summary.csv", "calibration.csv", "auc.csv", "plot_data.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let report: Value = serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap();
    let days: Vec<u64> = report.as_array().unwrap().iter().map(|r| r["day"].as_u64().unwrap()).collect();
    assert_eq!(days, [0, 2]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&dynrisk(&["--help"], None)), EXIT_OK);
    assert_eq!(code(&dynrisk(&["--version"], None)), EXIT_OK);
    assert_eq!(code(&dynrisk(&[], None)), EXIT_USAGE);
    assert_eq!(code(&dynrisk(&["transmogrify"], None)), EXIT_USAGE);
    assert_eq!(code(&dynrisk(&["simulate", "--n", "lots"], None)), EXIT_USAGE);
    // no --data and no CROWN_DATA_DIR
    assert_eq!(code(&dynrisk(&["fit"], None)), EXIT_USAGE);
    // invalid generator configuration
    let out = dynrisk(&["simulate", "--n", "0"], Some(tmp.path()));
    assert_eq!(code(&out), EXIT_USAGE, "{}", stderr(&out));
    // missing or malformed data
    let out = dynrisk(&["fit", "--data", tmp.path().join("absent").to_str().unwrap()], Some(tmp.path()));
    assert_eq!(code(&out), EXIT_DATA);
    assert!(stderr(&out).starts_with("error:"));
    let bad = tmp.path().join("bad");
    std::fs::create_dir_all(&bad).unwrap();
    std::fs::write(bad.join("schema.json"), "{ not json").unwrap();
    assert_eq!(code(&dynrisk(&["fit", "--data", bad.to_str().unwrap()], Some(tmp.path()))), EXIT_DATA);
}
