//! Neuro-cued target speaker extraction at desk scale.
//!
//! The crate builds the whole pipeline from first principles: a dense f64
//! autodiff engine (`tensor`), selective state-space sequence blocks
//! (`ssm`), Kolmogorov-Arnold layers (`kan`), the dual-path speech encoder
//! (`speech`), the attention+KAN EEG encoder (`eeg`), cross-modal fusion
//! and mask-based extraction (`fusion`), SI-SDR training (`loss`, `optim`,
//! `trainer`), deterministic synthetic corpora (`synth`), and a CLI.

pub mod eeg;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod kan;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod speech;
pub mod ssm;
pub mod stoi;
pub mod synth;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor};
