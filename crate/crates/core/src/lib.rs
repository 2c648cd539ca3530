//! Iterative detection refinement with group confidence pooling.
//!
//! Proposals are scored and regressed by a shared predictor, then each
//! detection is moved to the confidence-weighted mean location of the
//! same-class detections overlapping it. The loop repeats for a fixed number
//! of iterations; detections predicted as background stay put. Training
//! unrolls the same loop and sums the per-iteration multi-task losses.
//!
//! Alongside the engine the crate ships a seeded synthetic benchmark,
//! PASCAL-style AP evaluation with a false-positive breakdown, and the file
//! formats used by the command-line tool.

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod grouping;
pub mod io;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod refine;
pub mod synthdata;

pub use error::{Error, Result};
pub use geometry::{decode, encode, iou, BBox, ImageExtent, RegressionTarget};
pub use model::{PredictorModel, TrainConfig};
pub use refine::{DetectionState, Prediction, Predictor, RefinementConfig};
