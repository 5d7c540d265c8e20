//! Weakly supervised object detection from human-object interaction labels.
//!
//! A relational region proposal network predicts an attention map from fused
//! image, pose and verb features. Thresholding that map yields pseudo boxes
//! that train a detector on classes that never had box supervision.

pub mod annotations;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod grid;
pub mod images;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod pseudolabel;
pub mod rrpn;
pub mod synthworld;
pub mod training;
pub mod util;

pub use error::{Error, Result};
