use serde::{Deserialize, Serialize};

use super::HeldOut;
use crate::cohort::{EventType, NUM_EVENTS};
use crate::error::{Error, Result};
use crate::linalg::nan_as_null;
use crate::prediction::cumulative_by_day;

/// Smallest expected count per calibration bin.
pub const MIN_EXPECTED: f64 = 5.0;
pub const MAX_BINS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub first_day: u32,
    pub last_day: u32,
    pub observed: u64,
    pub expected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventCalibration {
    pub event: EventType,
    pub bins: Vec<CalibrationBin>,
    pub chi2: f64,
    pub df: usize,
    #[serde(with = "nan_as_null")]
    pub normalized_chi2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub events: Vec<EventCalibration>,
    /// Pooled over event types.
    pub chi2: f64,
    pub df: usize,
    #[serde(with = "nan_as_null")]
    pub normalized_chi2: f64,
}

/// Contiguous bins from the first day on; a bin closes once its expected count
/// reaches `max(5, total / 5)`, and a short tail joins the previous bin.
fn bins(expected: &[f64], observed: &[u64], first_day: u32) -> Option<Vec<CalibrationBin>> {
    let total: f64 = expected.iter().sum();
    if total < MIN_EXPECTED {
        return None;
    }
    let threshold = MIN_EXPECTED.max(total / MAX_BINS as f64);
    let mut out: Vec<CalibrationBin> = Vec::new();
    let mut open: Option<CalibrationBin> = None;
    for (i, (&e, &o)) in expected.iter().zip(observed).enumerate() {
        let day = first_day + i as u32;
        let b = open.get_or_insert(CalibrationBin { first_day: day, last_day: day, observed: 0, expected: 0.0 });
        b.last_day = day;
        b.observed += o;
        b.expected += e;
        if b.expected >= threshold && out.len() < MAX_BINS - 1 {
            out.push(open.take().expect("open bin"));
        }
    }
    if let Some(tail) = open {
        let full = out.len() == MAX_BINS;
        match out.last_mut() {
            Some(prev) if tail.expected < MIN_EXPECTED || full => {
                prev.last_day = tail.last_day;
                prev.observed += tail.observed;
                prev.expected += tail.expected;
            }
            _ => out.push(tail),
        }
    }
    Some(out)
}

fn chi2(bins: &[CalibrationBin]) -> f64 {
    bins.iter().map(|b| (b.observed as f64 - b.expected).powi(2) / b.expected).sum()
}

fn ratio(chi2: f64, df: usize) -> f64 {
    if df == 0 {
        f64::NAN
    } else {
        chi2 / df as f64
    }
}

/// Observed against expected event counts after conditioning day `t`.
pub fn calibration(patients: &[HeldOut], t: u32, horizon: u32) -> Result<CalibrationReport> {
    let days = horizon.saturating_sub(t) as usize;
    let mut events = Vec::with_capacity(NUM_EVENTS);
    for m in EventType::ALL {
        let mut expected = vec![0.0; days];
        let mut observed = vec![0u64; days];
        for p in patients {
            for (i, row) in p.distribution.values.iter().enumerate().take(days) {
                expected[i] += row[m.index()];
            }
            if let (Some(kind), Some(day)) = (p.outcome.kind(), p.outcome.event_day()) {
                if kind == m && day > t && day <= horizon {
                    observed[(day - t - 1) as usize] += 1;
                }
            }
        }
        let bins = bins(&expected, &observed, t + 1).ok_or_else(|| Error::InsufficientEvents(m.name().into()))?;
        let c = chi2(&bins);
        let df = bins.len() - 1;
        events.push(EventCalibration { event: m, chi2: c, df, normalized_chi2: ratio(c, df), bins });
    }
    let chi2: f64 = events.iter().map(|e| e.chi2).sum();
    let df: usize = events.iter().map(|e| e.df).sum();
    Ok(CalibrationReport { events, chi2, df, normalized_chi2: ratio(chi2, df) })
}

/// Mann-Whitney AUC with midranks for ties; `NaN` if either group is empty.
pub fn auc(cases: &[f64], controls: &[f64]) -> f64 {
    let (n1, n0) = (cases.len(), controls.len());
    if n1 == 0 || n0 == 0 {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = cases.iter().map(|&s| (s, true)).chain(controls.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    (rank_sum - (n1 * (n1 + 1)) as f64 / 2.0) / (n1 * n0) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayAuc {
    pub event: String,
    pub event_day: u32,
    pub auc: f64,
    pub cases: usize,
    pub controls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedDay {
    pub event: String,
    pub event_day: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    /// Incident cases on each day against patients still at risk after it.
    pub by_day: Vec<DayAuc>,
    /// Days without cases or controls.
    pub skipped: Vec<SkippedDay>,
    /// Ventilation or death against discharge by the horizon.
    pub severe: Option<f64>,
    pub severe_day: u32,
    pub severe_cases: usize,
    pub severe_controls: usize,
}

/// Scores are predicted cumulative probabilities of the event by each day.
pub fn time_varying_auc(patients: &[HeldOut], t: u32, horizon: u32) -> AucReport {
    let cumulative: Vec<Vec<[f64; NUM_EVENTS]>> = patients.iter().map(|p| cumulative_by_day(&p.distribution)).collect();
    let mut by_day = Vec::new();
    let mut skipped = Vec::new();
    for m in EventType::ALL {
        for tau in t + 1..=horizon {
            let i = (tau - t - 1) as usize;
            let (mut cases, mut controls) = (Vec::new(), Vec::new());
            for (p, cum) in patients.iter().zip(&cumulative) {
                let score = cum[i][m.index()];
                if p.outcome.kind() == Some(m) && p.outcome.event_day() == Some(tau) {
                    cases.push(score);
                } else if p.outcome.at_risk_after(tau) {
                    controls.push(score);
                }
            }
            if cases.is_empty() || controls.is_empty() {
                skipped.push(SkippedDay { event: m.name().into(), event_day: tau });
            } else {
                by_day.push(DayAuc {
                    event: m.name().into(),
                    event_day: tau,
                    auc: auc(&cases, &controls),
                    cases: cases.len(),
                    controls: controls.len(),
                });
            }
        }
    }
    let (mut severe, mut discharged) = (Vec::new(), Vec::new());
    for (p, cum) in patients.iter().zip(&cumulative) {
        let (Some(kind), Some(day)) = (p.outcome.kind(), p.outcome.event_day()) else { continue };
        if day <= t || day > horizon {
            continue;
        }
        let last = cum.last().expect("at least one future day");
        let score = last[EventType::Ventilation.index()] + last[EventType::Death.index()];
        if kind.is_severe() {
            severe.push(score);
        } else {
            discharged.push(score);
        }
    }
    let value = auc(&severe, &discharged);
    AucReport {
        by_day,
        skipped,
        severe: value.is_finite().then_some(value),
        severe_day: horizon,
        severe_cases: severe.len(),
        severe_controls: discharged.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Outcome;
    use crate::hazards::XiGrid;

    fn held(outcome: Outcome, values: Vec<[f64; 3]>) -> HeldOut {
        let remainder = 1.0 - values.iter().flatten().sum::<f64>();
        HeldOut { index: 0, id: "p".into(), fold: 0, outcome, distribution: XiGrid { from_day: 0, values, remainder } }
    }

    #[test]
    fn midrank_auc() {
        assert_eq!(auc(&[3.0, 4.0], &[1.0, 2.0]), 1.0);
        assert_eq!(auc(&[1.0], &[2.0]), 0.0);
        assert_eq!(auc(&[1.0, 1.0], &[1.0]), 0.5);
        assert_eq!(auc(&[2.0, 1.0], &[1.0, 0.0]), 0.875);
        assert!(auc(&[], &[1.0]).is_nan());
    }

    #[test]
    fn perfect_counts_give_zero_chi2() {
        // 40 patients with identical predictions; observed counts equal expected counts
        let probs = vec![[0.25, 0.125, 0.125], [0.25, 0.125, 0.125]];
        let mut patients = Vec::new();
        let plan = [(EventType::Discharge, 1, 10), (EventType::Discharge, 2, 10), (EventType::Ventilation, 1, 5), (EventType::Ventilation, 2, 5), (EventType::Death, 1, 5), (EventType::Death, 2, 5)];
        for (kind, day, n) in plan {
            for _ in 0..n {
                patients.push(held(Outcome::Event { kind, day }, probs.clone()));
            }
        }
        let r = calibration(&patients, 0, 2).unwrap();
        assert_eq!(r.chi2, 0.0);
        for e in &r.events {
            assert!(e.bins.iter().all(|b| b.expected >= MIN_EXPECTED));
        }
    }

    #[test]
    fn binning_respects_minimum_and_cap() {
        let e = vec![1.0; 40];
        let o = vec![1u64; 40];
        let b = bins(&e, &o, 1).unwrap();
        assert_eq!(b.len(), 5);
        assert!(b.iter().all(|x| x.expected >= 5.0));
        assert_eq!(b.iter().map(|x| x.observed).sum::<u64>(), 40);
        assert_eq!(b.last().unwrap().last_day, 40);
        // a small tail is merged
        let e = vec![3.0, 3.0, 3.0, 3.0, 1.0];
        let b = bins(&e, &[0; 5], 1).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].expected, 7.0);
        assert!(bins(&[1.0, 2.0], &[0, 0], 1).is_none());
    }

    #[test]
    fn severe_auc_uses_final_cumulative_risk() {
        let patients = vec![
            held(Outcome::Event { kind: EventType::Death, day: 2 }, vec![[0.1, 0.1, 0.3], [0.1, 0.1, 0.1]]),
            held(Outcome::Event { kind: EventType::Discharge, day: 1 }, vec![[0.5, 0.0, 0.0], [0.3, 0.0, 0.1]]),
            held(Outcome::Censored, vec![[0.1; 3], [0.1; 3]]),
        ];
        let r = time_varying_auc(&patients, 0, 2);
        assert_eq!(r.severe, Some(1.0));
        assert_eq!((r.severe_cases, r.severe_controls), (1, 1));
        let d1 = r.by_day.iter().find(|a| a.event == "discharge" && a.event_day == 1).unwrap();
        assert_eq!((d1.cases, d1.controls), (1, 2));
        assert_eq!(d1.auc, 1.0);
    }
}
