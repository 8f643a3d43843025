//! Desk-scale laboratory for masked video pretraining with motion-track
//! supervision.
//!
//! The pipeline: [`synth`] generates sprite videos with analytically known
//! motion, [`tokenizer`] cuts clips into space-time tubelets, [`tracks`]
//! turns point trajectories into normalized displacement targets and a
//! motion-saliency map, [`masking`] picks which tubes the encoder sees,
//! [`model`] is a small transformer encoder with dual decoders and
//! hand-written gradients, [`objectives`] builds reconstruction targets
//! and the masked losses, and [`training`] runs pretraining, linear
//! probes, and finetuning.

pub mod error;
pub mod linalg;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod training;
pub mod rng;
pub mod tokenizer;
pub mod synth;
pub mod tracks;

pub use error::{Error, Result};
