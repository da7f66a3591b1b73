//! Cup-to-disc ratio measurement from tight bounding-box supervision.
//!
//! The crate provides the weakly supervised segmentation loss built from
//! multiple-instance bags (crossing lines of each tight box and the pixels
//! outside all boxes), class-specific box regression with expected-IoU sample
//! selection, and the CDR post-processing and evaluation metrics. Instead of
//! training a network, [`optimizer`] minimizes the joint loss directly over a
//! per-image logit map and regression field, which exercises every loss,
//! gradient and post-processing path on synthetic data from [`synth`].

pub mod bags;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod optimizer;
pub mod oracle;
pub mod pgm;
pub mod pipeline;
pub mod regression;
pub mod segloss;
pub mod smoothmax;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{iou, mask_to_tight_box, BBox, BinaryMask, ClassId, Dims, LabeledBox, LogitMap, Planes, ProbabilityMap, TightBoxLabel};
