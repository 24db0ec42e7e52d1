//! Contrastive multiple-instance training for two-tower clip/narration
//! embeddings.
//!
//! The crate is organised bottom-up: [`numkernel`] provides dense `f64`
//! operations with reverse-mode rules, [`encoders`] builds the clip and
//! narration towers on top of it, [`corpus`] generates misaligned narrated
//! streams, [`sampling`] forms candidate bags and in-batch negatives,
//! [`losses`] implements the seven objectives, [`trainer`] runs Adam with a
//! warmup/step-decay schedule and [`evalkit`] measures retrieval,
//! localization and linear-probe quality.

pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod losses;
pub mod numkernel;
pub mod rng;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
