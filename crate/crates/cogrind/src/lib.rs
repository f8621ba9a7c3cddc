//! Grounding of referring expressions in short synthetic video clips.
//!
//! The crate is a self-contained research stack: a reverse-mode autodiff
//! tape over dense `f64` tensors, a bidirectional-LSTM expression encoder
//! with attribute attention, a tiny strided convolutional backbone, a
//! cross-frame feature-enhancement stage, a YOLO-style grid head, and the
//! training/evaluation plumbing that ties them together. Everything is
//! deterministic for a fixed seed, including the synthetic clip generator
//! used for the test corpus.
//!
//! Typical flow:
//!
//! 1. [`synth`] renders a dataset of moving-shape clips with referring
//!    expressions and tight ground-truth boxes.
//! 2. [`trainer`] fits a [`model::Grounder`] on it (losses and the
//!    optimizer live there).
//! 3. [`model::Grounder::predict_video`] emits per-frame candidate boxes,
//!    [`postproc`] stabilizes the per-frame choice across a temporal
//!    window, and [`metrics`] scores the result against ground truth.
//!
//! The `cogrind` CLI wraps those stages as subcommands; the book under
//! `book/` in the repository walks through the same pipeline chapter by
//! chapter.

pub mod attention;
pub mod cogrounding;
pub mod config;
pub mod geom;
pub mod gradcheck;
pub mod head;
pub mod metrics;
pub mod model;
pub mod params;
pub mod postproc;
pub mod records;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod visual;

pub use tape::{Tape, TensorId};
pub use tensor::{Real, Tensor, TensorError};
