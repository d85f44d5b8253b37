use dynrisk_core::cohort::{EventType, Outcome, NUM_EVENTS};
use dynrisk_core::evaluation::{auc, calibration, time_varying_auc, FoldAssignment, HeldOut};
use dynrisk_core::hazards::{xi_from_hazards, XiGrid};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn auc_ignores_monotone_transforms(
        cases in proptest::collection::vec(-3.0f64..3.0, 1..40),
        controls in proptest::collection::vec(-3.0f64..3.0, 1..40),
    ) {
        let a = auc(&cases, &controls);
        let f = |v: &f64| (2.0 * v).exp() + v;
        let b = auc(&cases.iter().map(f).collect::<Vec<_>>(), &controls.iter().map(f).collect::<Vec<_>>());
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((a + auc(&controls, &cases) - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn folds_partition_the_cohort(n in 2usize..300, k in 2usize..10, seed in 0u64..1000) {
        prop_assume!(k <= n);
        let f = FoldAssignment::new(n, k, seed).unwrap();
        let mut all: Vec<usize> = (0..k).flat_map(|i| f.test(i)).collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = (0..k).map(|i| f.test(i).len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(f.train(0).len() + f.test(0).len(), n);
    }
}

/// Held-out patients whose outcomes are drawn from their own predictions.
fn simulated(n: usize, t: u32, horizon: u32, seed: u64) -> Vec<HeldOut> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let risk = rng.random_range(0.02..0.25);
            let split: [f64; NUM_EVENTS] = [0.7, 0.2, 0.1];
            let hazards: Vec<[f64; NUM_EVENTS + 1]> =
                (t + 1..=horizon).map(|_| [1.0 - risk, risk * split[0], risk * split[1], risk * split[2]]).collect();
            let distribution = xi_from_hazards(t, &hazards);
            let mut u: f64 = rng.random();
            let mut outcome = Outcome::Censored;
            'draw: for (d, row) in distribution.days().zip(&distribution.values) {
                for m in 0..NUM_EVENTS {
                    u -= row[m];
                    if u < 0.0 {
                        outcome = Outcome::Event { kind: EventType::from_index(m), day: d };
                        break 'draw;
                    }
                }
            }
            HeldOut { index: i, id: format!("p{i}"), fold: 0, outcome, distribution }
        })
        .collect()
}

#[test]
fn chi2_does_not_depend_on_bin_or_patient_order() {
    let patients = simulated(1500, 2, 20, 1);
    let report = calibration(&patients, 2, 20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for e in &report.events {
        let mut bins = e.bins.clone();
        bins.shuffle(&mut rng);
        let c: f64 = bins.iter().map(|b| (b.observed as f64 - b.expected).powi(2) / b.expected).sum();
        assert!((c - e.chi2).abs() < 1e-12 * e.chi2.max(1.0));
        assert_eq!(e.df + 1, e.bins.len());
    }
    let mut shuffled = patients.clone();
    shuffled.shuffle(&mut rng);
    let other = calibration(&shuffled, 2, 20).unwrap();
    assert!((other.chi2 - report.chi2).abs() < 1e-9 * report.chi2.max(1.0));
    assert_eq!(other.df, report.df);
}

#[test]
fn well_calibrated_predictions_pass() {
    let patients = simulated(3000, 0, 20, 2);
    let report = calibration(&patients, 0, 20).unwrap();
    assert!(report.normalized_chi2 < 3.0, "{}", report.normalized_chi2);
    // expected counts per event add up to the predicted mass
    for e in &report.events {
        let mass: f64 = patients.iter().map(|p| p.distribution.values.iter().map(|r| r[e.event.index()]).sum::<f64>()).sum();
        let expected: f64 = e.bins.iter().map(|b| b.expected).sum();
        assert!((mass - expected).abs() < 1e-8);
    }
}

#[test]
fn calibration_needs_expected_events() {
    let flat = XiGrid { from_day: 0, values: vec![[0.0; NUM_EVENTS]; 5], remainder: 1.0 };
    let patients = vec![HeldOut { index: 0, id: "a".into(), fold: 0, outcome: Outcome::Censored, distribution: flat }];
    assert!(calibration(&patients, 0, 5).is_err());
}

#[test]
fn informative_scores_discriminate() {
    let patients = simulated(2000, 0, 20, 3);
    let r = time_varying_auc(&patients, 0, 20);
    assert_eq!(r.severe_day, 20);
    // the per-patient risk drives every event type, so higher scores mean earlier events
    assert!(r.by_day.iter().all(|d| d.auc.is_finite()));
    assert!(r.by_day.iter().map(|d| d.auc).sum::<f64>() / r.by_day.len() as f64 > 0.55);
    assert!(r.severe_cases > 0 && r.severe_controls > 0);
}
