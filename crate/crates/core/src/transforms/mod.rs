//! Marginal Gaussianization, natural splines and design matrices.

mod design;
mod gauss;
mod spline;

pub use design::{build_design, build_design_for_cells, check_rank, Cell, CovariateEncoder, DesignMatrices, DesignSpec, TimeAxis};
pub use gauss::{normal_cdf, normal_quantile, GaussTransform, MarginalTransform, Transforms, MIN_VALUES};
pub use spline::{quantile, SplineBasis};
