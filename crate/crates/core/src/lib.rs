//! Quality control for 3D T1-weighted brain MRI.
//!
//! The crate covers the whole pipeline:
//!
//! * [`volume`]: the 3D image carrier, NIfTI I/O, rigid resampling and 3D FFTs.
//! * [`simulate`]: motion, noise and poor-contrast artefact simulation.
//! * [`metrics`]: ND-WGM, SNR and reference-free sharpness measures.
//! * [`calibrate`]: selection of simulation parameter ranges against target metric means.
//! * [`dataset`]: manifests, phantom corpora, pre-training corpora and subject-level splits.
//! * [`model`]: the Conv5FC3 classifier, training, cross-validation, fine-tuning and inference.
//! * [`evaluate`]: tier rules, recombination of artefact grades and evaluation statistics.
//! * [`cli`]: the `cdwqc` command-line surface.

pub mod calibrate;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod simulate;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{KSpace, RigidTransform, Volume3D};
