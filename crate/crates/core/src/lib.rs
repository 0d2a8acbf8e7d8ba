//! Ensemble manifold segmentation and shared-backbone multi-task training.
//!
//! The crate turns the neighborhood structure of an unlabeled feature set into
//! an ensemble of pseudo-classification tasks ([`ems`]) and trains a
//! multilayer perceptron with one shared backbone, an optional supervised head
//! and one head per pseudo task ([`net`]). The [`tasks`] module wires both
//! into the model-imitation and semi-supervised harnesses, and [`cli`] exposes
//! everything through the `mfnet` binary.
//!
//! ```no_run
//! use mfnet::{data::FeatureSet, ems::{run_ems, EmsConfig}};
//!
//! let fs = FeatureSet::load("features.bin").unwrap();
//! let cfg = EmsConfig { z: 10, t: 20, k: 5, ..EmsConfig::default() };
//! let ensemble = run_ems(&fs, &cfg).unwrap();
//! assert_eq!(ensemble.n_trials(), 20);
//! ```

pub mod cli;
pub mod data;
pub mod ems;
pub mod error;
pub mod neighbors;
pub mod net;
pub mod rng;
pub mod synth;
pub mod tasks;

pub use error::{Error, Result};
