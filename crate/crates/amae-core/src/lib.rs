//! Dual-distribution anomaly detection on masked-autoencoder
//! reconstructions, end to end: a procedural radiograph-like dataset
//! generator, a small ViT encoder/decoder trained from scratch, a
//! frozen-feature anomaly classifier, pseudo-label-driven dual-module
//! adaptation, inter-discrepancy scoring, and the metrics to evaluate it.

pub mod error;
pub mod image;
pub mod masking;
pub mod optim;
pub mod par;
pub mod rng;
pub mod synthcxr;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
