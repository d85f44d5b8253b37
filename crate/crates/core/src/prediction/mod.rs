//! Event forecasts for a patient observed through day `t`.
//!
//! The prospective pathway simulates future biomarkers from the admission-time
//! mixed model and averages the resulting hazards. The retrospective pathway
//! updates the baseline-only ξ grid with the likelihood of the observed
//! history under each hypothesized (event day, event type).

mod prospective;
mod retrospective;

use serde::{Deserialize, Serialize};

use crate::cohort::{EventType, NUM_EVENTS};
use crate::error::{Error, Result};
use crate::hazards::XiGrid;
use crate::linalg;

pub use prospective::{prospective_predict, ProspectiveForecast};
pub use retrospective::{
    likelihood_grid, retrospective_predict, FanPath, FanSeries, RetrospectiveOptions, RetrospectivePrediction, TrajectoryFan,
};

pub const DEFAULT_SIMULATIONS: usize = 200;
pub const DEFAULT_WINDOW: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    InitialXi,
    Likelihood,
    UpdatedPosterior,
}

/// Log-scale values over `(τ, m)` for `τ = from_day+1..=from_day+len`, plus one
/// cell for "no event through the horizon".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "GridDoc", try_from = "GridDoc")]
pub struct PredictionGrid {
    pub kind: GridKind,
    pub from_day: u32,
    pub log_values: Vec<[f64; NUM_EVENTS]>,
    pub log_remainder: f64,
}

impl PredictionGrid {
    pub fn from_xi(xi: &XiGrid) -> Self {
        Self {
            kind: GridKind::InitialXi,
            from_day: xi.from_day,
            log_values: xi.values.iter().map(|r| r.map(f64::ln)).collect(),
            log_remainder: xi.remainder.ln(),
        }
    }

    pub fn days(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.log_values.len()).map(move |i| self.from_day + 1 + i as u32)
    }

    /// Values on the probability scale.
    pub fn to_xi(&self) -> XiGrid {
        XiGrid {
            from_day: self.from_day,
            values: self.log_values.iter().map(|r| r.map(f64::exp)).collect(),
            remainder: self.log_remainder.exp(),
        }
    }

    /// Log values minus the largest grid cell, for heatmap display.
    pub fn log_normalized(&self) -> (Vec<[f64; NUM_EVENTS]>, f64) {
        let max = self.log_values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return (self.log_values.clone(), self.log_remainder);
        }
        (self.log_values.iter().map(|r| r.map(|v| v - max)).collect(), self.log_remainder - max)
    }

    /// `Σ_τ` of each event type, plus the remainder, on the probability scale.
    pub fn totals(&self) -> EventProbabilities {
        let mut acc = [0.0; NUM_EVENTS];
        for r in &self.log_values {
            for m in 0..NUM_EVENTS {
                acc[m] += r[m].exp();
            }
        }
        EventProbabilities::new(acc, self.log_remainder.exp())
    }
}

fn opt(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn opt_row(r: &[f64; NUM_EVENTS]) -> [Option<f64>; NUM_EVENTS] {
    r.map(opt)
}

fn unopt(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NEG_INFINITY)
}

/// JSON layout; `null` stands for a zero-probability (log `-inf`) cell.
#[derive(Serialize, Deserialize)]
struct GridDoc {
    kind: GridKind,
    from_day: u32,
    days: Vec<u32>,
    events: Vec<String>,
    log_values: Vec<[Option<f64>; NUM_EVENTS]>,
    log_remainder: Option<f64>,
    /// Relative to the panel maximum.
    #[serde(default, skip_deserializing)]
    log_normalized: Vec<[Option<f64>; NUM_EVENTS]>,
    #[serde(default, skip_deserializing)]
    log_normalized_remainder: Option<f64>,
}

impl From<PredictionGrid> for GridDoc {
    fn from(g: PredictionGrid) -> Self {
        let (norm, norm_rem) = g.log_normalized();
        GridDoc {
            kind: g.kind,
            from_day: g.from_day,
            days: g.days().collect(),
            events: EventType::ALL.iter().map(|e| e.name().to_string()).collect(),
            log_values: g.log_values.iter().map(opt_row).collect(),
            log_remainder: opt(g.log_remainder),
            log_normalized: norm.iter().map(opt_row).collect(),
            log_normalized_remainder: opt(norm_rem),
        }
    }
}

impl TryFrom<GridDoc> for PredictionGrid {
    type Error = String;

    fn try_from(d: GridDoc) -> std::result::Result<Self, String> {
        if d.days.len() != d.log_values.len() {
            return Err("days and log_values differ in length".into());
        }
        Ok(PredictionGrid {
            kind: d.kind,
            from_day: d.from_day,
            log_values: d.log_values.iter().map(|r| r.map(unopt)).collect(),
            log_remainder: unopt(d.log_remainder),
        })
    }
}

/// Probability of each event type within the horizon and of none.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventProbabilities {
    pub discharge: f64,
    pub ventilation: f64,
    pub death: f64,
    pub no_event: f64,
}

impl EventProbabilities {
    pub fn new(events: [f64; NUM_EVENTS], no_event: f64) -> Self {
        Self { discharge: events[0], ventilation: events[1], death: events[2], no_event }
    }

    pub fn get(&self, m: EventType) -> f64 {
        match m {
            EventType::Discharge => self.discharge,
            EventType::Ventilation => self.ventilation,
            EventType::Death => self.death,
        }
    }
}

/// `posterior ∝ L · ξ`, normalized in log space over the grid and the remainder cell.
pub fn retrospective_update(xi: &PredictionGrid, loglik: &PredictionGrid) -> Result<PredictionGrid> {
    if xi.from_day != loglik.from_day || xi.log_values.len() != loglik.log_values.len() {
        return Err(Error::DimensionMismatch("ξ and likelihood grids cover different days".into()));
    }
    let joint: Vec<[f64; NUM_EVENTS]> = xi
        .log_values
        .iter()
        .zip(&loglik.log_values)
        .map(|(a, b)| [0, 1, 2].map(|m| a[m] + b[m]))
        .collect();
    let joint_rem = xi.log_remainder + loglik.log_remainder;
    let all = joint.iter().flatten().copied().chain(std::iter::once(joint_rem));
    if all.clone().any(|v| v.is_nan() || v == f64::INFINITY) {
        return Err(Error::NonFiniteInput);
    }
    let norm = linalg::log_sum_exp(all);
    if norm == f64::NEG_INFINITY {
        return Err(Error::AllZeroPosterior);
    }
    Ok(PredictionGrid {
        kind: GridKind::UpdatedPosterior,
        from_day: xi.from_day,
        log_values: joint.iter().map(|r| r.map(|v| v - norm)).collect(),
        log_remainder: joint_rem - norm,
    })
}

/// Probability of each event type by each future day.
pub fn cumulative_by_day(dist: &XiGrid) -> Vec<[f64; NUM_EVENTS]> {
    let mut acc = [0.0; NUM_EVENTS];
    dist.values
        .iter()
        .map(|r| {
            for m in 0..NUM_EVENTS {
                acc[m] += r[m];
            }
            acc
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    Prospective,
    Retrospective,
}

impl std::str::FromStr for Pathway {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "prospective" => Ok(Pathway::Prospective),
            "retrospective" => Ok(Pathway::Retrospective),
            other => Err(format!("unknown pathway `{other}`")),
        }
    }
}

/// Output of either pathway.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pathway", rename_all = "lowercase")]
pub enum Prediction {
    Prospective(ProspectiveForecast),
    Retrospective(RetrospectivePrediction),
}

impl Prediction {
    /// Probability of each (event day, event type) after the conditioning day.
    pub fn event_distribution(&self) -> XiGrid {
        match self {
            Prediction::Prospective(f) => f.event_distribution(),
            Prediction::Retrospective(r) => r.posterior.to_xi(),
        }
    }

    pub fn cumulative(&self) -> EventProbabilities {
        match self {
            Prediction::Prospective(f) => f.cumulative,
            Prediction::Retrospective(r) => r.cumulative,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(kind: GridKind, vals: &[[f64; 3]], rem: f64) -> PredictionGrid {
        PredictionGrid { kind, from_day: 2, log_values: vals.to_vec(), log_remainder: rem }
    }

    #[test]
    fn flat_likelihood_returns_prior() {
        let xi = XiGrid { from_day: 2, values: vec![[0.1, 0.2, 0.05], [0.3, 0.1, 0.05]], remainder: 0.2 };
        let prior = PredictionGrid::from_xi(&xi);
        let lik = grid(GridKind::Likelihood, &[[-3.0; 3]; 2], -3.0);
        let post = retrospective_update(&prior, &lik).unwrap().to_xi();
        for (a, b) in post.values.iter().flatten().zip(xi.values.iter().flatten()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(post.total(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn point_likelihood_concentrates() {
        let xi = XiGrid { from_day: 2, values: vec![[0.25; 3], [0.0833; 3]], remainder: 0.0 };
        let ninf = f64::NEG_INFINITY;
        let lik = grid(GridKind::Likelihood, &[[ninf, ninf, ninf], [ninf, -10.0, ninf]], ninf);
        let post = retrospective_update(&PredictionGrid::from_xi(&xi), &lik).unwrap();
        assert_eq!(post.log_values[1][1], 0.0);
        assert_eq!(post.to_xi().values[0], [0.0; 3]);
        let none = grid(GridKind::Likelihood, &[[ninf; 3]; 2], ninf);
        assert!(matches!(retrospective_update(&PredictionGrid::from_xi(&xi), &none), Err(Error::AllZeroPosterior)));
    }

    #[test]
    fn grid_json_round_trip_keeps_zero_cells() {
        let g = grid(GridKind::UpdatedPosterior, &[[-1.0, f64::NEG_INFINITY, -2.0]], -0.5);
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.contains("log_normalized"));
        let back: PredictionGrid = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        let (norm, rem) = g.log_normalized();
        assert_eq!(norm[0][0], 0.0);
        assert_eq!(rem, 0.5);
    }
}
