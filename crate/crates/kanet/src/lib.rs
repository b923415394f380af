//! Few-shot class-incremental learning with a frozen staged transformer
//! encoder, a knowledge-vector library, a trainable cross-attention fusion
//! block, and a cosine prototype classifier, trained by sampling pseudo
//! incremental episodes from the base session.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`tensor`]: dense tensors plus a reverse-mode tape covering exactly the
//!   op set the model needs.
//! - [`encoder`]: a frozen ViT-style encoder split into early, middle, and
//!   post stages.
//! - [`adapter`]: the knowledge library (class-mean early-stage class
//!   tokens) and the cross-attention fusion block that refines the
//!   middle-stage class token.
//! - [`classifier`]: cosine prototype classifier with temperature scaling.
//! - [`ipel`]: pseudo-episode meta-training of the fusion parameters.
//! - [`protocol`]: session streaming, the incremental procedure, metrics.
//! - [`data`]: synthetic datasets, the binary tensor format, manifests.
//! - [`config`] / [`commands`]: run configuration and CLI entry points.

pub mod adapter;
pub(crate) mod blocks;
pub mod classifier;
pub mod commands;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod ipel;
pub mod protocol;
pub mod tensor;

pub use error::{KanetError, Result};

use adapter::FusionParams;
use encoder::Encoder;
use tensor::Scalar;

/// The trainable-plus-frozen bundle the protocol and trainer operate on.
pub struct Model<T> {
    pub encoder: Encoder<T>,
    pub fusion: FusionParams<T>,
    /// Temperature for the cosine classifier.
    pub alpha: T,
}

impl<T: Scalar> Model<T> {
    pub fn new(encoder: Encoder<T>, fusion: FusionParams<T>, alpha: T) -> Self {
        Model { encoder, fusion, alpha }
    }
}
