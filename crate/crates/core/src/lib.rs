//! Ego lane number prediction from road images and lane binary masks.
//!
//! Four predictors are compared on deterministic synthetic driving scenes:
//!
//! - **A** image-only CNN,
//! - **B** a geometric heuristic counting positive-slope lines in the lane mask,
//! - **C** CNN over the image with the frame-`t` mask concatenated as a fourth channel,
//! - **D** CNN over the image with masks for frames `t−n..t+n` concatenated.
//!
//! Module map: [`tensor`] is the CNN engine, [`scene`] the generator and dataset
//! format, [`maskgeom`] the heuristic, [`models`] the variant definitions, and
//! [`harness`] the training/evaluation/comparison driver used by the CLI.

pub mod error;
pub mod harness;
pub mod maskgeom;
pub mod models;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
