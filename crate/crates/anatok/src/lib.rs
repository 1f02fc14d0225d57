//! Anatomy-driven token-wise self-supervised learning on synthetic
//! radiograph phantoms: synthetic-lesion augmentation, token-wise contrastive
//! learning against spatial-aware prototypes, anomaly-removal restoration,
//! and an evaluation harness for anomaly detection and linear probing.

pub mod assignments;
pub mod backbone;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod losses;
pub mod nn;
pub mod phantom;
pub mod plot;
pub mod rng;
pub mod slm;
pub mod trainer;

pub use error::{Error, Result};
