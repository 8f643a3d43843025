//! One optimization step's forward and backward pass.
//!
//! The same generic function serves the f32 training loop and the f64
//! finite-difference oracle, so the gradients under test are the
//! gradients used in production.

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::masking::MaskMap;
use crate::model::params::{GradStore, Params};
use crate::model::VideoModel;
use crate::objectives::{self, LossReport};
use ndarray::Array2;

/// Everything one step consumes, already tokenized and targeted.
pub struct StepBatch<F> {
    /// Per clip: (tokens, raw_len) tubelet pixels.
    pub raws: Vec<Array2<F>>,
    /// (clips * tokens, spatial dim), grid order within each clip.
    pub spatial_targets: Array2<F>,
    /// (clips * tokens, motion dim); None when no motion loss runs.
    pub motion_targets: Option<Array2<F>>,
    pub masks: Vec<MaskMap>,
}

impl<F: Real> StepBatch<F> {
    pub fn clips(&self) -> usize {
        self.masks.len()
    }

    pub fn masked_tokens(&self) -> usize {
        self.masks.iter().map(|m| m.masked_count()).sum()
    }
}

fn want_motion<F: Real>(batch: &StepBatch<F>, lambda: f64) -> Result<bool> {
    if lambda > 0.0 && batch.motion_targets.is_none() {
        return Err(Error::Config(
            "motion loss weight is positive but the batch carries no motion targets".into(),
        ));
    }
    Ok(lambda > 0.0)
}

/// Forward only: the loss a step would see. The finite-difference oracle
/// probes this exact function.
pub fn step_loss<F: Real>(
    model: &VideoModel,
    p: &Params<F>,
    batch: &StepBatch<F>,
    lambda: f64,
) -> Result<LossReport> {
    let motion = want_motion(batch, lambda)?;
    let (x, _etrace) = model.embed_visible(p, &batch.raws, &batch.masks)?;
    let (z, _enc) = model.encode(p, x, batch.clips())?;
    let out = model.decode_all(p, &z, &batch.masks, motion)?;
    let l_spatial = objectives::masked_loss(&out.spatial, &batch.spatial_targets, &batch.masks)?;
    let l_motion = if motion {
        objectives::masked_loss(
            out.motion.as_ref().expect("motion output requested"),
            batch.motion_targets.as_ref().expect("checked above"),
            &batch.masks,
        )?
    } else {
        0.0
    };
    Ok(objectives::combine(l_spatial, l_motion, lambda, batch.masked_tokens()))
}

/// Forward and backward: accumulates parameter gradients of the combined
/// loss into `g` and returns the loss report. With `lambda == 0` the
/// motion decoder is neither run nor differentiated, so its tensors keep
/// zero gradient and the remaining trajectory matches a model built
/// without it.
pub fn step_forward_backward<F: Real>(
    model: &VideoModel,
    p: &Params<F>,
    batch: &StepBatch<F>,
    lambda: f64,
    g: &mut GradStore<F>,
) -> Result<LossReport> {
    let motion = want_motion(batch, lambda)?;
    let (x, etrace) = model.embed_visible(p, &batch.raws, &batch.masks)?;
    let (z, enc_cache) = model.encode(p, x, batch.clips())?;
    let out = model.decode_all(p, &z, &batch.masks, motion)?;

    let (l_spatial, dspatial) =
        objectives::masked_loss_grad(&out.spatial, &batch.spatial_targets, &batch.masks)?;
    let (l_motion, dmotion) = if motion {
        let targets = batch.motion_targets.as_ref().expect("checked above");
        let (l, mut d) =
            objectives::masked_loss_grad(out.motion.as_ref().expect("requested"), targets, &batch.masks)?;
        let w = F::from_f64(lambda);
        d.mapv_inplace(|v| v * w);
        (l, Some(d))
    } else {
        (0.0, None)
    };

    let dz = model.decode_all_backward(p, &out.trace, &dspatial, dmotion.as_ref(), g)?;
    let dx = model.encode_backward(p, &enc_cache, dz, batch.clips(), g);
    model.embed_backward(p, &etrace, &dx, g);
    Ok(objectives::combine(l_spatial, l_motion, lambda, batch.masked_tokens()))
}
