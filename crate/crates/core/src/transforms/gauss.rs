use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cohort::{CohortDataset, PatientRecord};
use crate::error::{Error, Result};

pub const MIN_VALUES: usize = 10;

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Monotone map from raw biomarker values to standard-normal quantiles.
///
/// Knot `j` pairs a distinct training value with `Φ⁻¹((r̄ - 0.5) / n)`, where
/// `r̄` is its (mid)rank. Between knots the map is linear; outside the
/// training range it clamps to the extreme knots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussTransform {
    raw: Vec<f64>,
    normal: Vec<f64>,
}

impl GaussTransform {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        if values.len() < MIN_VALUES {
            return Err(Error::TooFewValues { needed: MIN_VALUES, got: values.len() });
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mut raw = Vec::new();
        let mut normal = Vec::new();
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            // ranks are 1-based: i+1 ..= j+1
            let midrank = (i + j) as f64 / 2.0 + 1.0;
            raw.push(sorted[i]);
            normal.push(normal_quantile((midrank - 0.5) / n));
            i = j + 1;
        }
        if raw.len() < 2 {
            return Err(Error::TooFewValues { needed: 2, got: raw.len() });
        }
        Ok(Self { raw, normal })
    }

    pub fn apply(&self, v: f64) -> f64 {
        interpolate(&self.raw, &self.normal, v)
    }

    pub fn invert(&self, z: f64) -> f64 {
        interpolate(&self.normal, &self.raw, z)
    }

    pub fn range(&self) -> (f64, f64) {
        (self.raw[0], self.raw[self.raw.len() - 1])
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let hi = xs.partition_point(|&v| v <= x);
    let lo = hi - 1;
    if xs[lo] == x {
        return ys[lo];
    }
    let w = (x - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + w * (ys[hi] - ys[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MarginalTransform {
    Gaussian(GaussTransform),
    Identity,
}

impl MarginalTransform {
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            MarginalTransform::Gaussian(g) => g.apply(v),
            MarginalTransform::Identity => v,
        }
    }

    pub fn invert(&self, z: f64) -> f64 {
        match self {
            MarginalTransform::Gaussian(g) => g.invert(z),
            MarginalTransform::Identity => z,
        }
    }
}

/// One marginal transform per biomarker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transforms {
    pub biomarkers: Vec<MarginalTransform>,
}

impl Transforms {
    pub fn identity(k: usize) -> Self {
        Self { biomarkers: vec![MarginalTransform::Identity; k] }
    }

    /// Pools every observed value of each biomarker, baseline included.
    pub fn fit_pooled(dataset: &CohortDataset) -> Result<Self> {
        let k = dataset.schema.num_biomarkers();
        let mut pooled = vec![Vec::new(); k];
        for p in &dataset.patients {
            for (kk, v) in p.baseline.iter().enumerate() {
                pooled[kk].push(*v);
            }
            for (kk, series) in p.daily.iter().enumerate() {
                pooled[kk].extend(series.iter().flatten());
            }
        }
        let biomarkers = pooled
            .iter()
            .map(|vals| GaussTransform::fit(vals).map(MarginalTransform::Gaussian))
            .collect::<Result<_>>()?;
        Ok(Self { biomarkers })
    }

    pub fn apply(&self, biomarker: usize, v: f64) -> f64 {
        self.biomarkers[biomarker].apply(v)
    }

    pub fn invert(&self, biomarker: usize, z: f64) -> f64 {
        self.biomarkers[biomarker].invert(z)
    }

    pub fn apply_patient(&self, p: &PatientRecord) -> PatientRecord {
        p.map_values(|k, v| self.apply(k, v))
    }

    pub fn apply_dataset(&self, d: &CohortDataset) -> CohortDataset {
        CohortDataset {
            schema: d.schema.clone(),
            patients: d.patients.iter().map(|p| self.apply_patient(p)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn median_of_odd_sample_maps_to_zero() {
        let vals: Vec<f64> = (0..11).map(|i| (i * i) as f64).collect();
        let g = GaussTransform::fit(&vals).unwrap();
        assert_eq!(g.apply(25.0), 0.0);
    }

    #[test]
    fn normal_sample_gives_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let g = GaussTransform::fit(&vals).unwrap();
        let worst = (0..=400)
            .map(|i| -2.0 + i as f64 * 0.01)
            .map(|x| (g.apply(x) - x).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.05, "max deviation {worst}");
    }

    #[test]
    fn training_values_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..500)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                85.0 * (0.15 * z).exp()
            })
            .collect();
        let g = GaussTransform::fit(&vals).unwrap();
        for v in vals {
            assert!((g.invert(g.apply(v)) - v).abs() < 1e-9);
        }
    }

    #[test]
    fn clamps_outside_training_range() {
        let vals: Vec<f64> = (1..=20).map(f64::from).collect();
        let g = GaussTransform::fit(&vals).unwrap();
        assert_eq!(g.apply(-100.0), g.apply(1.0));
        assert_eq!(g.apply(1e6), g.apply(20.0));
        assert_eq!(g.invert(10.0), 20.0);
        assert!(g.apply(1.0) < 0.0 && g.apply(1.0).is_finite());
    }

    #[test]
    fn input_errors() {
        assert!(matches!(GaussTransform::fit(&[1.0; 5]), Err(Error::TooFewValues { .. })));
        let mut v: Vec<f64> = (0..20).map(f64::from).collect();
        v[3] = f64::NAN;
        assert!(matches!(GaussTransform::fit(&v), Err(Error::NonFiniteInput)));
    }

    #[test]
    fn ties_share_a_quantile() {
        let vals = [1.0, 2.0, 2.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let g = GaussTransform::fit(&vals).unwrap();
        assert!((g.apply(2.0) - normal_quantile(2.5 / 10.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn order_preserving(mut vals in proptest::collection::vec(-1e3f64..1e3, 10..200), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            vals.sort_by(f64::total_cmp);
            let g = GaussTransform::fit(&vals).unwrap();
            let (lo, hi) = g.range();
            prop_assume!(hi > lo);
            let (x1, x2) = (lo + a.min(b) * (hi - lo), lo + a.max(b) * (hi - lo));
            prop_assume!(x2 - x1 > 1e-9 * (hi - lo));
            prop_assert!(g.apply(x1) < g.apply(x2));
        }
    }
}
