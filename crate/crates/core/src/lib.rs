//! Claims-based screening pipeline for an underdiagnosed liver disease.
//!
//! The pipeline turns longitudinal prescription/medical claims into rolling
//! cross-section cohorts, engineers sparse temporal features, trains
//! second-order gradient-boosted trees, evaluates them with
//! downsampling-corrected precision-recall, and explains predictions with
//! additive per-feature attributions. A seeded synthetic claims generator
//! with a planted disease signal stands in for proprietary data so the whole
//! chain can be exercised end to end.

pub mod calendar;
pub mod claims;
pub mod cohort;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod explain;
pub mod features;
pub mod gbt;
pub mod pipeline;
pub mod protocol;
pub mod rcs;
pub mod seeding;
pub mod synth;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
