//! Semi-supervised segmentation with cross-window consistency and a dynamic
//! pseudo-label memory bank.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dpm;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod reliability;
pub mod rng;
pub mod sgrid;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{BinaryMask, ConfidenceMap, Grid, Image, LabelMap, IGNORE};
