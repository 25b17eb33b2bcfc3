//! Plot-level detection of crop-residue burning from two-sensor reflectance
//! time series.
//!
//! The crate is organised as a pipeline:
//!
//! * [`scene`] ingests gridded observations, masks clouds, rasterizes plots
//!   and reports observation cadence.
//! * [`indices`] evaluates per-pixel burn and vegetation indices.
//! * [`separability`] measures how well a source separates burned from
//!   unburned plots as time since burning grows.
//! * [`features`] turns each pixel's time series into a feature vector.
//! * [`forest`] trains the random forest and runs plot-holdout validation.
//! * [`threshold`] aggregates pixel scores per plot and picks cutoffs.
//! * [`synth`] generates synthetic scenes with known ground truth.
//! * [`pipeline`] wires the stages into reproducible runs.

pub mod features;
pub mod forest;
pub mod indices;
pub mod pipeline;
pub mod scene;
pub mod separability;
pub mod synth;
pub mod threshold;

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/indices.md")]
    mod indices {}
    #[doc = include_str!("../../../book/src/separability.md")]
    mod separability {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/forest.md")]
    mod forest {}
    #[doc = include_str!("../../../book/src/thresholds.md")]
    mod thresholds {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
