//! Per-clip preparation: synthesis or preloaded clips, track extraction,
//! displacement targets, saliency, and batch assembly.
//!
//! Tracks and motion targets are produced on the fly from each clip's
//! own track set; nothing here caches across epochs, so memory stays
//! flat in the dataset size and every draw is a pure function of the
//! named seed streams.

use crate::error::{Error, Result};
use crate::masking::{MaskMap, MaskingConfig, SaliencySource, sample_mask};
use crate::objectives::SpatialTargeter;
use crate::rng;
use crate::synth::{ClipShape, SceneConfig, VideoClip, generate_stratified_clip};
use crate::tokenizer::{TokenGrid, TokenizerConfig, patchify};
use crate::tracks::{
    self, DisplacementMode, NoiseMode, TrackSet, TrackerGridConfig, aggregate_mean,
};
use crate::training::step::StepBatch;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// The synthetic clip set: `clip_count` stratified clips drawn from the
/// data seed. Identical config + seed always yields the identical set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub shape: ClipShape,
    pub scene: SceneConfig,
    pub clip_count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            shape: ClipShape::default(),
            scene: SceneConfig::default(),
            clip_count: 4096,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        self.scene.validate()?;
        if self.clip_count == 0 {
            return Err(Error::Config("clip count must be positive".into()));
        }
        Ok(())
    }

    /// Clip `index` of the set, derived from the data seed alone.
    pub fn clip(&self, index: usize) -> Result<VideoClip> {
        generate_stratified_clip(self.seed, index as u64, &self.shape, &self.scene)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackNoise {
    pub mode: NoiseMode,
    pub sigma: f64,
}

/// How displacement targets are extracted and shaped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingPlan {
    pub tracker: TrackerGridConfig,
    /// Interpolation factor applied to extracted targets (1 = off).
    pub upsample: usize,
    pub mode: DisplacementMode,
    pub saliency: SaliencySource,
    pub noise: Option<TrackNoise>,
    /// Seed for on-the-fly noise draws, one stream index per clip.
    pub noise_seed: u64,
}

impl Default for TrackingPlan {
    fn default() -> Self {
        TrackingPlan {
            tracker: TrackerGridConfig::default(),
            upsample: 2,
            mode: DisplacementMode::PerStep,
            saliency: SaliencySource::MeanMagnitude,
            noise: None,
            noise_seed: 0,
        }
    }
}

impl TrackingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.tracker.grid_factor == 0 || self.tracker.stride == 0 {
            return Err(Error::Config("tracker grid factor and stride must be positive".into()));
        }
        if self.upsample == 0 {
            return Err(Error::Config("upsample factor must be positive".into()));
        }
        if let Some(n) = &self.noise {
            if !(n.sigma >= 0.0) || !n.sigma.is_finite() {
                return Err(Error::Config(format!("noise sigma must be finite and >= 0, got {}", n.sigma)));
            }
        }
        Ok(())
    }

    /// Sub-displacements per token edge: tracker density times target
    /// interpolation.
    pub fn factor(&self) -> usize {
        self.tracker.grid_factor * self.upsample
    }

    /// Output width of the motion head these targets demand.
    pub fn motion_dim(&self) -> usize {
        2 * self.factor() * self.factor()
    }
}

/// One clip, ready to batch.
pub struct ClipBundle {
    pub grid: TokenGrid,
    /// (tokens, raw_len) tubelet pixels.
    pub raw: Array2<f32>,
    /// (tokens, motion_dim) displacement targets, when tracked.
    pub motion_rows: Option<Array2<f32>>,
    /// Patch-grid motion saliency, when tracked.
    pub saliency: Option<Array2<f64>>,
    pub appearance_label: u32,
    pub motion_label: u32,
}

/// Extracts tracks for a clip per the plan: oracle queries on the
/// configured grid, optional noise. `index` selects the clip's noise
/// stream so a clip's noise is fixed across epochs, exactly as if the
/// tracks had been extracted to a file once.
pub fn clip_tracks(clip: &VideoClip, plan: &TrackingPlan, index: usize, patch: usize) -> Result<TrackSet> {
    let shape = clip.shape();
    let (queries, rows, cols) = tracks::grid_queries(&shape, patch, plan.tracker.grid_factor)?;
    let set = crate::synth::oracle_track(clip, &queries, rows, cols, plan.tracker.stride)?;
    match &plan.noise {
        Some(n) => {
            let seed = rng::stream(plan.noise_seed, "tracks.noise", index as u64).gen::<u64>();
            tracks::inject_noise(&set, n.mode, n.sigma, seed, shape.width, shape.height)
        }
        None => Ok(set),
    }
}

/// Builds the per-clip bundle. `tracking: None` skips track extraction
/// entirely (the pixel-only, motion-unaware path). `file_tracks`
/// overrides oracle extraction with an externally loaded set, which is
/// used as-is (noise, if any, is already in the file).
pub fn clip_bundle(
    clip: &VideoClip,
    index: usize,
    tok: &TokenizerConfig,
    tracking: Option<&TrackingPlan>,
    file_tracks: Option<&TrackSet>,
) -> Result<ClipBundle> {
    let shape = clip.shape();
    let grid = tok.grid(&shape)?;
    let raw = patchify::<f32>(&clip.pixels, tok)?;
    let (motion_rows, saliency) = match tracking {
        None => (None, None),
        Some(plan) => {
            let set = match file_tracks {
                Some(t) => t.clone(),
                None => clip_tracks(clip, plan, index, tok.patch)?,
            };
            let mut targets = tracks::displacements(&set, tok.patch, plan.mode)?;
            let sal = match plan.saliency {
                SaliencySource::MeanMagnitude => targets.patch_saliency(grid.rows, grid.cols)?,
                SaliencySource::DirectedMean => {
                    aggregate_mean(&targets.directed_saliency(), grid.rows, grid.cols)?
                }
            };
            if plan.upsample > 1 {
                targets = tracks::upsample(&targets, plan.upsample)?;
            }
            let rows = crate::objectives::motion_target_rows::<f32>(&targets, &grid)?;
            (Some(rows), Some(sal))
        }
    };
    Ok(ClipBundle {
        grid,
        raw,
        motion_rows,
        saliency,
        appearance_label: clip.appearance_label,
        motion_label: clip.motion_label,
    })
}

/// Stacks bundles into a step batch: per-clip mask draws, spatial
/// targets from the targeter, motion targets when every bundle has them.
/// Consumes the bundles so the raw tubelets move into the batch instead
/// of being copied.
pub fn assemble_batch(
    bundles: Vec<ClipBundle>,
    targeter: &SpatialTargeter,
    masking: &MaskingConfig,
    mask_seeds: &[u64],
) -> Result<StepBatch<f32>> {
    if bundles.is_empty() {
        return Err(Error::Input("cannot assemble an empty batch".into()));
    }
    if mask_seeds.len() != bundles.len() {
        return Err(Error::Input(format!(
            "{} mask seeds for {} clips",
            mask_seeds.len(),
            bundles.len()
        )));
    }
    let grid = bundles[0].grid;
    if bundles.iter().any(|b| b.grid != grid) {
        return Err(Error::Input("bundles disagree on token grid".into()));
    }
    let n = grid.tokens();
    let with_motion = bundles[0].motion_rows.is_some();
    if bundles.iter().any(|b| b.motion_rows.is_some() != with_motion) {
        return Err(Error::Input("some bundles carry motion targets and some do not".into()));
    }

    let mut masks: Vec<MaskMap> = Vec::with_capacity(bundles.len());
    for (b, seed) in bundles.iter().zip(mask_seeds) {
        masks.push(sample_mask(masking, &grid, b.saliency.as_ref(), *seed)?);
    }

    let d_s = targeter.dim(bundles[0].raw.ncols());
    let mut spatial = Array2::<f32>::zeros((bundles.len() * n, d_s));
    {
        let ss = spatial.as_slice_mut().expect("fresh array");
        for (i, b) in bundles.iter().enumerate() {
            targeter.targets_into(&b.raw.view(), &mut ss[i * n * d_s..(i + 1) * n * d_s])?;
        }
    }
    let motion_targets = if with_motion {
        let d_m = bundles[0].motion_rows.as_ref().unwrap().ncols();
        let mut m = Array2::<f32>::zeros((bundles.len() * n, d_m));
        let ms = m.as_slice_mut().expect("fresh array");
        for (i, b) in bundles.iter().enumerate() {
            let rows = b.motion_rows.as_ref().unwrap();
            ms[i * n * d_m..(i + 1) * n * d_m]
                .copy_from_slice(rows.as_slice().expect("motion rows are standard layout"));
        }
        Some(m)
    } else {
        None
    };
    let raws = bundles.into_iter().map(|b| b.raw).collect();
    Ok(StepBatch { raws, spatial_targets: spatial, motion_targets, masks })
}

/// Fisher-Yates order for one epoch, drawn from the data-order stream.
pub fn epoch_order(seed: u64, epoch: usize, count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut r = rng::stream(seed, "data.order", epoch as u64);
    for i in (1..count).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskStrategy;
    use crate::objectives::SpatialTargeter;

    fn small_data() -> DataConfig {
        DataConfig {
            shape: ClipShape { frames: 4, height: 32, width: 32, channels: 1 },
            scene: SceneConfig::default(),
            clip_count: 8,
            seed: 5,
        }
    }

    fn small_tok() -> TokenizerConfig {
        TokenizerConfig { tubelet_depth: 2, patch: 16, dim: 16 }
    }

    #[test]
    fn clip_generation_is_deterministic() {
        let cfg = small_data();
        let a = cfg.clip(3).unwrap();
        let b = cfg.clip(3).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.motion_label, b.motion_label);
    }

    #[test]
    fn bundle_without_tracking_has_no_motion_rows() {
        let cfg = small_data();
        let clip = cfg.clip(0).unwrap();
        let b = clip_bundle(&clip, 0, &small_tok(), None, None).unwrap();
        assert!(b.motion_rows.is_none());
        assert!(b.saliency.is_none());
        assert_eq!(b.raw.dim(), (8, 512));
    }

    #[test]
    fn bundle_with_tracking_matches_the_plan_dimensions() {
        let cfg = small_data();
        let clip = cfg.clip(1).unwrap();
        let plan = TrackingPlan { upsample: 2, ..TrackingPlan::default() };
        let b = clip_bundle(&clip, 1, &small_tok(), Some(&plan), None).unwrap();
        let rows = b.motion_rows.as_ref().unwrap();
        assert_eq!(rows.dim(), (8, plan.motion_dim()));
        assert_eq!(b.saliency.as_ref().unwrap().dim(), (2, 2));
    }

    #[test]
    fn clip_noise_is_fixed_per_clip_across_calls() {
        let cfg = small_data();
        let clip = cfg.clip(2).unwrap();
        let plan = TrackingPlan {
            noise: Some(TrackNoise { mode: NoiseMode::Spatial, sigma: 1.0 }),
            noise_seed: 9,
            ..TrackingPlan::default()
        };
        let a = clip_tracks(&clip, &plan, 2, 16).unwrap();
        let b = clip_tracks(&clip, &plan, 2, 16).unwrap();
        let c = clip_tracks(&clip, &plan, 3, 16).unwrap();
        assert_eq!(a.positions, b.positions);
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn assembled_batch_lines_up() {
        let cfg = small_data();
        let tok = small_tok();
        let plan = TrackingPlan::default();
        let bundles: Vec<ClipBundle> = (0..3)
            .map(|i| clip_bundle(&cfg.clip(i).unwrap(), i, &tok, Some(&plan), None).unwrap())
            .collect();
        let masking = MaskingConfig {
            mask_ratio: 0.5,
            strategy: MaskStrategy::MotionBins,
            ..MaskingConfig::default()
        };
        let batch =
            assemble_batch(bundles, &SpatialTargeter::Pixel, &masking, &[1, 2, 3]).unwrap();
        assert_eq!(batch.raws.len(), 3);
        assert_eq!(batch.spatial_targets.dim(), (24, 512));
        assert_eq!(batch.motion_targets.as_ref().unwrap().dim(), (24, 8));
        assert_eq!(batch.masks.len(), 3);
        assert!(batch.masked_tokens() > 0);
    }

    #[test]
    fn mixed_motion_presence_is_rejected() {
        let cfg = small_data();
        let tok = small_tok();
        let plan = TrackingPlan::default();
        let with = clip_bundle(&cfg.clip(0).unwrap(), 0, &tok, Some(&plan), None).unwrap();
        let without = clip_bundle(&cfg.clip(1).unwrap(), 1, &tok, None, None).unwrap();
        let masking = MaskingConfig {
            mask_ratio: 0.5,
            strategy: MaskStrategy::RandomTube,
            ..MaskingConfig::default()
        };
        assert!(matches!(
            assemble_batch(vec![with, without], &SpatialTargeter::Pixel, &masking, &[1, 2]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn epoch_order_is_a_permutation_and_varies_by_epoch() {
        let a = epoch_order(1, 0, 50);
        let b = epoch_order(1, 0, 50);
        let c = epoch_order(1, 1, 50);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
