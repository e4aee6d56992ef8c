//! Multi-domain defect transfer for surface-inspection imagery: unpaired
//! image-to-image translation that swaps the foreground defect (shape +
//! style) of a sample while preserving its background product, plus the
//! procedural dataset, evaluation metrics, and augmentation benchmark
//! around it.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod params;
pub mod rng;
pub mod synthesis;
pub mod training;

pub use error::{DtganError, Result};

pub mod cli;
