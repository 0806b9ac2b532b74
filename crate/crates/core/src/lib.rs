//! Class-query video action detection at desk scale.
//!
//! A toy convolutional backbone feeds a multi-scale deformable encoder; the
//! decoder alternates localizing layers (actor boxes and embeddings) with
//! classifying layers in which one learnable query per action class attends
//! over each actor's own context map. Training matches predicted tubes to
//! padded ground truth with the Hungarian algorithm.

pub mod attention;
pub mod cdl;
pub mod config;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod ldl;
pub mod matching;
pub mod nn;

pub use config::Config;
pub use error::{Error, Result};
