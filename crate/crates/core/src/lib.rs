//! Contour uncertainty modelling for left-ventricle segmentation: heatmap
//! moments, a PCA shape model with posterior conditioning, hierarchical and
//! temporal contour sampling, clinical metrics, Monte-Carlo propagation and
//! calibration measures.

// `!(x > 0.0)` is used deliberately so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod error;
pub mod geometry;
pub mod heatmap;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod propagation;
pub mod rng;
pub mod sampler;
pub mod shape_model;
pub mod synth;

pub use error::{ContourError, Error, Result};
pub use geometry::{Contour, Frame, Landmarks, SegmentationMask, View};
pub use heatmap::{ContourDistribution, PointGaussian};
pub use linalg::{Mat2, Vec2};
pub use metrics::{MetricKind, MetricValue};
pub use rng::RandomStream;
pub use shape_model::{ModelKind, ShapeModel};
