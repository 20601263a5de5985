//! Few-shot contrastive domain adaptation for morphology-independent cell
//! instance segmentation.
//!
//! The pipeline: a small encoder-decoder predicts a distance field, a unit
//! flow field pointing at the cell skeleton and a border logit per pixel
//! ([`net`]), trained against targets derived from instance masks
//! ([`labelgen`]) with the losses in [`losses`]. Masks are recovered by
//! Euler integration of the flow and density clustering ([`segmenter`]) and
//! scored with AP at IoU 0.5 ([`evaluator`]). [`protocol`] strings together
//! pretraining, shot extraction and the two-phase K-shot adaptation on the
//! synthetic domains of [`synthgen`].

pub mod datamodel;
pub mod error;
pub mod evaluator;
pub mod labelgen;
pub mod losses;
pub mod net;
pub mod protocol;
pub mod real;
pub mod segmenter;
pub mod synthgen;

pub use error::{Error, Result};
pub use real::Real;
