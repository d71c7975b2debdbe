//! Deterministic augmentation engine for visual-tracking training pairs.
//!
//! The crate turns annotated frames into (template, search) patch pairs
//! using object-aware random cropping, general photometric and geometric
//! augmentations, and token-level feature mixing of distractor objects.
//! Every random decision is drawn from a stream derived from
//! `(seed, dataset, epoch, index, stage)`, so any sample can be rebuilt
//! in isolation and output does not depend on worker count.

pub mod analysis;
pub mod batch;
pub mod config;
pub mod cropping;
pub mod datasets;
pub mod error;
pub mod gda;
pub mod geometry;
pub mod manifest;
pub mod mixing;
pub mod pipeline;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
