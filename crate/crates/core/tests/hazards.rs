use dynrisk_core::cohort::{generate_synthetic_cohort, GeneratorKind, Preset, SynthConfig, NUM_EVENTS};
use dynrisk_core::hazards::{
    fit_hazards, fit_multinomial, softmax_with_reference, xi_from_hazards, HazardDesign, HazardKind, MultinomialOptions,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Plain softmax over all categories, reference included.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(eta in proptest::collection::vec(-30.0f64..30.0, 1..6), c in -30.0f64..30.0) {
        let p = softmax_with_reference(&eta);
        let shifted: Vec<f64> = std::iter::once(c).chain(eta.iter().map(|v| v + c)).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_extreme_predictors(eta in proptest::collection::vec(-1e4f64..1e4, 1..6)) {
        let p = softmax_with_reference(&eta);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn xi_and_remainder_sum_to_one(raw in proptest::collection::vec(proptest::array::uniform4(0.001f64..1.0), 1..25)) {
        let hazards: Vec<[f64; NUM_EVENTS + 1]> = raw
            .iter()
            .map(|r| {
                let z: f64 = r.iter().sum();
                r.map(|v| v / z)
            })
            .collect();
        let xi = xi_from_hazards(4, &hazards);
        prop_assert!((xi.total() - 1.0).abs() < 1e-12);
        prop_assert_eq!(xi.days().next(), Some(5));
        // first day needs no survival factor
        prop_assert!((xi.values[0][1] - hazards[0][2]).abs() < 1e-15);
    }
}

#[test]
fn newton_trace_never_decreases() {
    let cfg = SynthConfig::preset(Preset::Balanced, GeneratorKind::Retrospective, 300, 6);
    let (ds, _) = generate_synthetic_cohort(&cfg).unwrap();
    let design = HazardDesign::for_dataset(HazardKind::Retrospective, &ds, 4).unwrap();
    let (x, y) = design.rows(&ds);
    let fit = fit_multinomial(&x, &y, NUM_EVENTS + 1, &MultinomialOptions::default()).unwrap();
    assert!(fit.converged);
    let noise = 1e3 * f64::EPSILON * fit.penalized_loglik.abs();
    assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - noise), "{:?}", fit.trace);
    assert!(fit.se.iter().all(|s| s.is_finite() && *s > 0.0));
}

#[test]
fn hazard_fit_round_trips_through_json() {
    let cfg = SynthConfig::preset(Preset::Balanced, GeneratorKind::Prospective, 200, 2);
    let (ds, _) = generate_synthetic_cohort(&cfg).unwrap();
    let design = HazardDesign::for_dataset(HazardKind::Prospective, &ds, 3).unwrap();
    let fit = fit_hazards(&ds, design, &MultinomialOptions::default()).unwrap();
    let back = serde_json::from_str(&serde_json::to_string(&fit).unwrap()).unwrap();
    assert_eq!(fit, back);
}

#[test]
fn rejects_bad_inputs() {
    let x = DMatrix::from_element(3, 2, 1.0);
    assert!(fit_multinomial(&x, &[0, 1], 4, &MultinomialOptions::default()).is_err());
    assert!(fit_multinomial(&x, &[0, 1, 4], 4, &MultinomialOptions::default()).is_err());
    let mut bad = x.clone();
    bad[(0, 0)] = f64::NAN;
    assert!(fit_multinomial(&bad, &[0, 1, 2], 4, &MultinomialOptions::default()).is_err());
}
