//! Desk-scale simulator for privacy-preserving multi-source domain-adaptive
//! object detection.
//!
//! The pipeline has three stages: one-shot target-aware style generation
//! ([`stylegen`]), federated training of category-inconsistent probabilistic
//! detectors with contrastive alignment and backbone-only fusion
//! ([`federation`]), and cross-client knowledge distillation through
//! inconsistent-categories integration ([`ici`]). Everything is deterministic
//! under a master seed and runs on one CPU core in minutes.

pub mod error;
pub mod evalkit;
pub mod federation;
pub mod ici;
pub mod losses;
pub mod pipeline;
pub mod rngutil;
pub mod scenesim;
pub mod stylegen;
pub mod tinynet;
pub mod types;

pub use error::{Error, Result};
