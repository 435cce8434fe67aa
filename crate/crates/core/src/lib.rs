//! Adversarially learned time-series augmentation ("views") for multi-machine
//! tokamak disruption prediction, with the alarm-based evaluation harness,
//! handcrafted baseline augmentations, small classifiers and the analysis
//! statistics used to compare augmentation strategies.

pub mod analysis;
pub mod augbase;
pub mod decomp;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod gradnet;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod viewmaker;

pub use domain::{Discharge, FeatureSchema, Machine, MachineStats, Split, SplitCase, SplitSpec};
pub use error::{Error, Result};
pub use rng::Rng;
