//! Pseudo-domain specific models (PDSM) for outcome prediction from
//! heterogeneous multi-site imaging.
//!
//! Images are embedded by Gram-matrix statistics of a fixed convolutional
//! style model and clustered into pseudo-domains with k-means. A pooled
//! task network is pre-trained on all labelled images and then fine-tuned
//! once per pseudo-domain. Each image is routed to its pseudo-domain's
//! network for 512-wide penultimate features, which are PCA-reduced and fed
//! (baseline and 12-week visits side by side) to a random forest that
//! predicts the 48-week score.

pub mod cluster;
pub mod config;
pub mod error;
pub mod forest;
pub mod numcore;
pub mod pipeline;
pub mod reduce;
pub mod styleembed;
pub mod synthsite;
pub mod taskmodel;

pub use error::{Error, Result};
