use dynrisk_core::cohort::{generate_synthetic_cohort, EventType, GeneratorKind, Preset, SynthConfig};
use dynrisk_core::mlmm::{self, condition_on_past, default_spec, FitMode, FitOptions, GaussianBelief};
use dynrisk_core::transforms::Cell;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn belief(n: usize, entries: &[f64], mean: &[f64]) -> GaussianBelief {
    let b = DMatrix::from_row_slice(n, n, &entries[..n * n]);
    GaussianBelief {
        mean: DVector::from_row_slice(&mean[..n]),
        cov: &b * b.transpose() + DMatrix::identity(n, n),
        labels: (0..n).map(|i| Cell::new(i as u32 + 1, 0)).collect(),
    }
}

proptest! {
    #[test]
    fn sequential_conditioning_equals_joint(
        entries in proptest::collection::vec(-2.0f64..2.0, 36),
        mean in proptest::collection::vec(-5.0f64..5.0, 6),
        x in proptest::collection::vec(-5.0f64..5.0, 3),
    ) {
        let g = belief(6, &entries, &mean);
        let obs: Vec<(Cell, f64)> = [0, 2, 3].iter().zip(&x).map(|(&i, &v)| (g.labels[i], v)).collect();
        let joint = condition_on_past(&g, &obs).unwrap();
        let step = condition_on_past(&condition_on_past(&g, &obs[..1]).unwrap(), &obs[1..]).unwrap();
        prop_assert_eq!(&joint.labels, &step.labels);
        prop_assert!((&joint.mean - &step.mean).amax() < 1e-9);
        prop_assert!((&joint.cov - &step.cov).amax() < 1e-9);
    }

    #[test]
    fn conditioning_never_adds_variance(
        entries in proptest::collection::vec(-2.0f64..2.0, 25),
        mean in proptest::collection::vec(-5.0f64..5.0, 5),
        x in -5.0f64..5.0,
    ) {
        let g = belief(5, &entries, &mean);
        let post = condition_on_past(&g, &[(g.labels[4], x)]).unwrap();
        for i in 0..4 {
            prop_assert!(post.variance(i) <= g.variance(i) + 1e-12);
        }
    }
}

#[test]
fn unknown_cells_are_rejected() {
    let g = belief(2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]);
    assert!(condition_on_past(&g, &[(Cell::new(9, 0), 1.0)]).is_err());
}

#[test]
fn fit_trace_is_monotone() {
    let (ds, truth) = generate_synthetic_cohort(&SynthConfig::recovery(80, 3)).unwrap();
    let options = FitOptions { keep_trace: true, ..FitOptions::default() };
    let fit = mlmm::fit(&ds, FitMode::Prospective, &truth.mlmm[0].spec, &options).unwrap();
    assert!(fit.diagnostics.converged);
    let trace = &fit.diagnostics.trace;
    assert!(trace.len() > 2);
    let slack = 1e-9 * trace.last().unwrap().abs();
    assert!(trace.windows(2).all(|w| w[1] >= w[0] - slack), "{trace:?}");
    assert_eq!(*trace.last().unwrap(), fit.diagnostics.loglik);
}

#[test]
fn retrospective_strata_fit_and_round_trip() {
    let cfg = SynthConfig::preset(Preset::Balanced, GeneratorKind::Retrospective, 200, 12);
    let (ds, _) = generate_synthetic_cohort(&cfg).unwrap();
    let mode = FitMode::Retrospective(EventType::Ventilation);
    let spec = default_spec(&ds, mode, 4).unwrap();
    let fit = mlmm::fit(&ds, mode, &spec, &FitOptions::default()).unwrap();
    assert_eq!(fit.stratum(), Some(EventType::Ventilation));
    assert!(fit.diagnostics.converged);
    assert!(fit.beta_se().iter().all(|s| s.is_finite() && *s > 0.0));
    let back: mlmm::MlmmFit = serde_json::from_str(&serde_json::to_string(&fit).unwrap()).unwrap();
    assert_eq!(fit, back);
}

#[test]
fn small_strata_are_refused() {
    let cfg = SynthConfig::preset(Preset::Reference, GeneratorKind::Retrospective, 60, 1);
    let (ds, _) = generate_synthetic_cohort(&cfg).unwrap();
    let mode = FitMode::Retrospective(EventType::Death);
    let spec = default_spec(&ds, mode, 4).unwrap();
    let err = mlmm::fit(&ds, mode, &spec, &FitOptions::default()).unwrap_err();
    assert!(matches!(err, dynrisk_core::Error::InsufficientStratum { .. }), "{err}");
}
