//! Cross-validated calibration and discrimination of both pathways.

mod metrics;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortDataset, Outcome};
use crate::error::{Error, Result};
use crate::hazards::XiGrid;
use crate::model::{FittedModel, ModelConfig, PredictOptions};
use crate::prediction::Pathway;

pub use metrics::{
    auc, calibration, time_varying_auc, AucReport, CalibrationBin, CalibrationReport, DayAuc, EventCalibration,
};

pub const EVALUATION_DAYS: [u32; 4] = [0, 2, 4, 8];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// Fold of each patient, in dataset order.
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    /// Shuffles patients with `seed` and deals them round-robin into `k` folds.
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 || k > n {
            return Err(Error::InvalidConfig(format!("cannot split {n} patients into {k} folds")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut folds = vec![0; n];
        for (i, &p) in order.iter().enumerate() {
            folds[p] = i % k;
        }
        Ok(Self { k, seed, folds })
    }

    pub fn train(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }

    pub fn test(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }
}

/// Prediction for one held-out patient at one conditioning day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub index: usize,
    pub id: String,
    pub fold: usize,
    pub outcome: Outcome,
    /// Probability of each (event day, event type) after the conditioning day.
    pub distribution: XiGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayPredictions {
    pub day: u32,
    pub patients: Vec<HeldOut>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvPredictions {
    pub pathway: Pathway,
    pub folds: FoldAssignment,
    pub days: Vec<DayPredictions>,
}

/// Held-out predictions for every patient at risk on each day in `days`.
///
/// Each fold refits the transforms and the pathway's components on the other
/// folds; folds run concurrently and results are merged in patient order.
pub fn cross_validated_predictions(
    dataset: &CohortDataset,
    days: &[u32],
    pathway: Pathway,
    k: usize,
    seed: u64,
    config: &ModelConfig,
    options: &PredictOptions,
) -> Result<CvPredictions> {
    let folds = FoldAssignment::new(dataset.len(), k, seed)?;
    let options = PredictOptions { pathway, fan: false, ..options.clone() };
    let per_fold = (0..k)
        .into_par_iter()
        .map(|f| {
            let wrap = |e: Error| Error::FoldFitFailure { fold: f, source: Box::new(e) };
            let model = FittedModel::fit(&dataset.subset(&folds.train(f)), config, &[pathway]).map_err(wrap)?;
            let test = folds.test(f);
            days.iter()
                .map(|&t| {
                    test.iter()
                        .filter(|&&i| dataset.patients[i].outcome.at_risk_after(t))
                        .map(|&i| {
                            let p = &dataset.patients[i];
                            let pred = model.predict(p, t, &options).map_err(wrap)?;
                            Ok(HeldOut {
                                index: i,
                                id: p.id.clone(),
                                fold: f,
                                outcome: p.outcome,
                                distribution: pred.event_distribution(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let days = days
        .iter()
        .enumerate()
        .map(|(j, &day)| {
            let mut patients: Vec<HeldOut> = per_fold.iter().flat_map(|f| f[j].iter().cloned()).collect();
            patients.sort_by_key(|h| h.index);
            DayPredictions { day, patients }
        })
        .collect();
    Ok(CvPredictions { pathway, folds, days })
}

/// Calibration and discrimination of one pathway at one conditioning day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub pathway: Pathway,
    pub day: u32,
    pub n_patients: usize,
    pub calibration: CalibrationReport,
    pub auc: AucReport,
}

pub fn evaluate_predictions(cv: &CvPredictions, horizon: u32) -> Result<Vec<EvaluationReport>> {
    cv.days
        .iter()
        .map(|d| {
            Ok(EvaluationReport {
                pathway: cv.pathway,
                day: d.day,
                n_patients: d.patients.len(),
                calibration: calibration(&d.patients, d.day, horizon)?,
                auc: time_varying_auc(&d.patients, d.day, horizon),
            })
        })
        .collect()
}

/// Runs cross-validation for each pathway and scores every conditioning day.
pub fn evaluate(
    dataset: &CohortDataset,
    days: &[u32],
    pathways: &[Pathway],
    k: usize,
    seed: u64,
    config: &ModelConfig,
    options: &PredictOptions,
) -> Result<Vec<EvaluationReport>> {
    let mut out = Vec::new();
    for &pathway in pathways {
        let cv = cross_validated_predictions(dataset, days, pathway, k, seed, config, options)?;
        out.extend(evaluate_predictions(&cv, dataset.horizon())?);
    }
    Ok(out)
}

/// One line per (pathway, day, event, bin) for spreadsheets.
pub fn calibration_csv(reports: &[EvaluationReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pathway", "day", "event", "bin_start", "bin_end", "observed", "expected"])?;
    for r in reports {
        for e in &r.calibration.events {
            for b in &e.bins {
                w.write_record([
                    pathway_name(r.pathway).to_string(),
                    r.day.to_string(),
                    e.event.name().to_string(),
                    b.first_day.to_string(),
                    b.last_day.to_string(),
                    b.observed.to_string(),
                    format!("{:.6}", b.expected),
                ])?;
            }
        }
    }
    finish_csv(w)
}

/// One line per (pathway, day, event, event day) with the time-varying AUC.
pub fn auc_csv(reports: &[EvaluationReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pathway", "day", "event", "event_day", "auc", "cases", "controls"])?;
    for r in reports {
        for a in &r.auc.by_day {
            w.write_record([
                pathway_name(r.pathway).to_string(),
                r.day.to_string(),
                a.event.clone(),
                a.event_day.to_string(),
                format!("{:.6}", a.auc),
                a.cases.to_string(),
                a.controls.to_string(),
            ])?;
        }
    }
    finish_csv(w)
}

/// Summary table: one line per (pathway, day).
pub fn summary_csv(reports: &[EvaluationReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pathway", "day", "patients", "chi2", "df", "normalized_chi2", "severe_auc"])?;
    for r in reports {
        w.write_record([
            pathway_name(r.pathway).to_string(),
            r.day.to_string(),
            r.n_patients.to_string(),
            format!("{:.4}", r.calibration.chi2),
            r.calibration.df.to_string(),
            format!("{:.4}", r.calibration.normalized_chi2),
            r.auc.severe.map_or_else(String::new, |a| format!("{a:.4}")),
        ])?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn pathway_name(p: Pathway) -> &'static str {
    match p {
        Pathway::Prospective => "prospective",
        Pathway::Retrospective => "retrospective",
    }
}

/// x/y series for plotting observed vs expected counts and AUC over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub panel: String,
    pub pathway: Pathway,
    pub day: u32,
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn plot_data(reports: &[EvaluationReport]) -> Vec<PlotSeries> {
    let mut out = Vec::new();
    for r in reports {
        for e in &r.calibration.events {
            let x: Vec<f64> = e.bins.iter().map(|b| b.expected).collect();
            let y: Vec<f64> = e.bins.iter().map(|b| b.observed as f64).collect();
            out.push(PlotSeries { panel: "calibration".into(), pathway: r.pathway, day: r.day, label: e.event.name().into(), x, y });
        }
        let mut events: Vec<&str> = r.auc.by_day.iter().map(|a| a.event.as_str()).collect();
        events.dedup();
        for ev in events {
            let pts: Vec<&DayAuc> = r.auc.by_day.iter().filter(|a| a.event == ev).collect();
            out.push(PlotSeries {
                panel: "auc".into(),
                pathway: r.pathway,
                day: r.day,
                label: ev.to_string(),
                x: pts.iter().map(|a| a.event_day as f64).collect(),
                y: pts.iter().map(|a| a.auc).collect(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_evenly() {
        let f = FoldAssignment::new(100, 5, 3).unwrap();
        for k in 0..5 {
            assert_eq!(f.test(k).len(), 20);
            assert_eq!(f.train(k).len(), 80);
        }
        let f = FoldAssignment::new(103, 5, 3).unwrap();
        let sizes: Vec<usize> = (0..5).map(|k| f.test(k).len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(f, FoldAssignment::new(103, 5, 3).unwrap());
        assert_ne!(f, FoldAssignment::new(103, 5, 4).unwrap());
    }
}
