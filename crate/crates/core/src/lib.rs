//! Speech-based depression screening pipeline.
//!
//! Recordings are cut into N random T-second clips ([`segment`]), each clip is
//! turned into a fixed-length feature vector ([`features`], built on the
//! frame descriptors in [`lld`]), a small classifier labels every clip
//! ([`models`]), and a participant's clip labels are combined by majority
//! vote. [`eval`] runs this under participant-partitioned cross-validation
//! and reports accuracy, sensitivity, specificity and precision.
//! [`cohort`] synthesises labelled voice cohorts for end-to-end checks.

pub mod audio;
pub mod cohort;
pub mod error;
pub mod eval;
pub mod features;
pub mod lld;
pub mod manifest;
pub mod models;
pub mod rng;
pub mod segment;

pub use error::{Error, Result};
