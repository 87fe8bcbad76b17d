//! Self-supervised object detection from audio-visual correspondence.
//!
//! The pipeline runs in stages on a synthetic audio-visual corpus:
//!
//! ```text
//! synthdata -> ssl (contrastive localisation + Sinkhorn self-labelling)
//!           -> pseudolabel (heatmap boxes + cluster labels)
//!           -> detector (vision-only, anchor based)
//!           -> eval (mAP, cIoU/AUC, cluster matching)
//! ```
//!
//! [`pipeline`] ties the stages together with hashed, resumable artifacts and
//! backs the `avdet` command-line tool.

pub mod detector;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod pipeline;
pub mod pseudolabel;
pub mod rng;
pub mod ssl;
pub mod synthdata;

pub use error::{Error, Result};
