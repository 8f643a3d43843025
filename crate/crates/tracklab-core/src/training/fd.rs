//! End-to-end gradient verification for the full training step.
//!
//! The layer-level checks in the model tree verify each op in
//! isolation; this suite runs central differences through the complete
//! embed/encode/decode/loss pipeline, in both decoder modes, so every
//! parameterized tensor is exercised in the exact composition training
//! uses. The model is deliberately small (width 16, depth 1) because FD
//! cost scales with parameter count, but every op kind present at full
//! scale is present here.

use crate::error::Result;
use crate::masking::{MaskStrategy, MaskingConfig, sample_mask};
use crate::model::gradcheck::{self, GradComparison, FD_TOLERANCE};
use crate::model::params::GradStore;
use crate::model::{DecoderMode, ModelConfig, VideoModel};
use crate::tokenizer::TokenGrid;
use crate::training::step::{StepBatch, step_forward_backward, step_loss};
use ndarray::Array2;
use rand::Rng;

const FD_LAMBDA: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct FdModeReport {
    pub mode: DecoderMode,
    pub tensors: usize,
    pub comparison: GradComparison,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub modes: Vec<FdModeReport>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.modes.iter().map(|m| m.comparison.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < FD_TOLERANCE
    }
}

fn fd_model(mode: DecoderMode) -> Result<VideoModel> {
    let cfg = ModelConfig {
        embed_dim: 16,
        enc_depth: 1,
        enc_heads: 2,
        dec_dim: 12,
        dec_depth: 1,
        dec_heads: 2,
        decoder_mode: mode,
        motion_enabled: true,
        raw_len: 32,
        spatial_out: 32,
        motion_out: 2,
    };
    VideoModel::new(cfg, TokenGrid { slots: 2, rows: 2, cols: 2 })
}

fn fd_batch(model: &VideoModel, clips: usize, seed: u64) -> Result<StepBatch<f64>> {
    let grid = *model.grid();
    let n = grid.tokens();
    let raw = model.cfg().raw_len;
    let mut rng = crate::rng::stream(seed, "fd.data", 0);
    let raws: Vec<Array2<f64>> = (0..clips)
        .map(|_| Array2::from_shape_fn((n, raw), |_| rng.gen_range(-1.0..1.0)))
        .collect();
    let spatial_targets =
        Array2::from_shape_fn((clips * n, model.cfg().spatial_out), |_| rng.gen_range(-1.0..1.0));
    let motion_targets = Some(Array2::from_shape_fn((clips * n, model.cfg().motion_out), |_| {
        rng.gen_range(-0.5..0.5)
    }));
    let mask_cfg = MaskingConfig {
        mask_ratio: 0.5,
        strategy: MaskStrategy::RandomTube,
        ..MaskingConfig::default()
    };
    let masks = (0..clips)
        .map(|i| sample_mask(&mask_cfg, &grid, None, seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    Ok(StepBatch { raws, spatial_targets, motion_targets, masks })
}

fn check_mode(mode: DecoderMode, seed: u64) -> Result<FdModeReport> {
    let model = fd_model(mode)?;
    let mut p = model.init_params(seed).convert::<f64>();
    let batch = fd_batch(&model, 2, seed ^ 0x9e37)?;

    let mut analytic = GradStore::zeroed(&p);
    step_forward_backward(&model, &p, &batch, FD_LAMBDA, &mut analytic)?;
    let fd = gradcheck::fd_gradients(&mut p, &mut |p| {
        step_loss(&model, p, &batch, FD_LAMBDA).map(|r| r.total)
    })?;
    Ok(FdModeReport { mode, tensors: p.len(), comparison: gradcheck::compare(&p, &analytic, &fd) })
}

/// Central differences against the analytic backward pass for the whole
/// training step, once per decoder mode.
pub fn fd_suite() -> Result<FdReport> {
    let modes = [DecoderMode::Separate, DecoderMode::Joint]
        .into_iter()
        .map(|mode| check_mode(mode, 17))
        .collect::<Result<_>>()?;
    Ok(FdReport { modes })
}
