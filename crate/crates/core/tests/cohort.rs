use dynrisk_core::cohort::{export_csv, generate_synthetic_cohort, ingest_dir, GeneratorKind, Preset, SynthConfig};
use dynrisk_core::transforms::{SplineBasis, Transforms};
use proptest::prelude::*;

#[test]
fn csv_round_trip_preserves_the_cohort() {
    let cfg = SynthConfig::preset(Preset::Reference, GeneratorKind::Retrospective, 120, 9);
    let (ds, _) = generate_synthetic_cohort(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_csv(&ds, dir.path()).unwrap();
    assert_eq!(ingest_dir(dir.path()).unwrap(), ds);
}

#[test]
fn pooled_transforms_invert() {
    let cfg = SynthConfig::preset(Preset::Calibration, GeneratorKind::Prospective, 150, 4);
    let (ds, _) = generate_synthetic_cohort(&cfg).unwrap();
    let tr = Transforms::fit_pooled(&ds).unwrap();
    for p in ds.patients.iter().take(20) {
        for (day, k, v) in p.observed_cells(ds.horizon()) {
            let z = tr.apply(k, v);
            assert!(z.is_finite(), "day {day}");
            assert!((tr.invert(k, z) - v).abs() < 1e-6 * v.abs().max(1.0));
        }
    }
}

proptest! {
    #[test]
    fn spline_rows_have_the_declared_width(x in -5.0f64..30.0, df in 1usize..7) {
        let values: Vec<f64> = (1..=20).map(f64::from).collect();
        let basis = SplineBasis::from_data(&values, df).unwrap();
        let row = basis.eval(x);
        prop_assert_eq!(row.len(), basis.df());
        prop_assert!(row.iter().all(|v| v.is_finite()));
    }
}
