//! The pretraining loop: batches, the AdamW schedule, metrics, and
//! checkpoint save/resume.
//!
//! Everything observable is a pure function of the configuration and its
//! named seed streams: data content and order come from the data seed,
//! mask draws and parameter init from the training seed, track noise
//! from the tracking seed. A resumed run therefore continues exactly
//! where the saved one stopped, bit for bit.

use crate::error::{Error, Result};
use crate::masking::MaskingConfig;
use crate::model::checkpoint::{
    self, NamedTensor, params_tensors, parse_config, read_checkpoint, render_config,
    write_checkpoint,
};
use crate::model::params::{GradStore, Params};
use crate::model::{ModelConfig, VideoModel};
use crate::objectives::{LossConfig, LossReport, SpatialTargeter};
use crate::rng;
use crate::synth::VideoClip;
use crate::tokenizer::{TokenGrid, TokenizerConfig};
use crate::tracks::TrackSet;
use crate::training::data::{
    ClipBundle, DataConfig, TrackingPlan, assemble_batch, clip_bundle, epoch_order,
};
use crate::training::optim::{AdamW, learning_rate, motion_branch_tensor};
use crate::training::step::{StepBatch, step_forward_backward};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const METRICS_HEADER: &str = "step,epoch,loss,loss_spatial,loss_motion,lr,seconds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Master seed for parameter init and mask draws.
    pub seed: u64,
    /// Single worker, fixed reduction order. The desk-scale loop is
    /// sequential either way; the flag records the intent and keeps the
    /// config forward-compatible with parallel data loading.
    pub deterministic: bool,
    /// Save `checkpoint-epoch*.tmck` every this many epochs (0 = final
    /// checkpoint only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            batch_size: 32,
            epochs: 30,
            warmup_epochs: 3,
            seed: 0,
            deterministic: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup epochs ({}) must be smaller than total epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base lr must be positive, got {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// The complete recipe for one pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainPlan {
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub tracking: TrackingPlan,
    pub masking: MaskingConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

/// A validated plan with its derived pieces. The model's input/output
/// widths are always derived from data and objectives, never trusted
/// from the raw config.
pub struct ResolvedPlan {
    pub plan: PretrainPlan,
    pub grid: TokenGrid,
    pub model: VideoModel,
    pub targeter: SpatialTargeter,
    pub need_tracks: bool,
    pub steps_per_epoch: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl PretrainPlan {
    pub fn resolve(&self) -> Result<ResolvedPlan> {
        self.data.validate()?;
        self.tracking.validate()?;
        self.masking.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        let grid = self.tokenizer.grid(&self.data.shape)?;
        let raw_len = self.tokenizer.raw_len(self.data.shape.channels);
        let targeter = SpatialTargeter::from_config(
            &self.loss,
            self.train.seed,
            raw_len,
            self.tokenizer.tubelet_depth,
            self.tokenizer.patch,
            self.data.shape.channels,
        )?;
        let mut model_cfg = self.model.clone();
        model_cfg.embed_dim = self.tokenizer.dim;
        model_cfg.raw_len = raw_len;
        model_cfg.spatial_out = targeter.dim(raw_len);
        model_cfg.motion_out = self.tracking.motion_dim();
        model_cfg.validate()?;
        if self.loss.motion_active() && !model_cfg.motion_enabled {
            return Err(Error::Config(
                "motion loss is active but the model config disables the motion decoder".into(),
            ));
        }
        let need_tracks = self.loss.motion_active() || self.masking.strategy.uses_saliency();
        if need_tracks && self.tracking.tracker.stride != self.tokenizer.tubelet_depth {
            return Err(Error::Config(format!(
                "tracker stride {} must equal the tubelet depth {} so tracked frames align with temporal slots",
                self.tracking.tracker.stride, self.tokenizer.tubelet_depth
            )));
        }
        let mut plan = self.clone();
        plan.model = model_cfg.clone();
        let model = VideoModel::new(model_cfg, grid)?;
        let steps_per_epoch = self.data.clip_count.div_ceil(self.train.batch_size);
        Ok(ResolvedPlan {
            plan,
            grid,
            model,
            targeter,
            need_tracks,
            steps_per_epoch,
            warmup_steps: self.train.warmup_epochs * steps_per_epoch,
            total_steps: self.train.epochs * steps_per_epoch,
        })
    }

    fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }
}

/// Clips (and optionally their track sets) supplied from outside instead
/// of being synthesized from the data seed, e.g. decoded from a shard.
pub struct ExternalClips<'a> {
    pub clips: &'a [VideoClip],
    pub tracks: Option<&'a [TrackSet]>,
}

pub struct PretrainOutcome {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// A non-finite combined loss is unrecoverable: abort, naming the step
/// and both components so the blow-up is attributable.
pub fn check_finite_loss(report: &LossReport, step: usize) -> Result<()> {
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {step}: spatial {:e}, motion {:e}",
            report.spatial, report.motion
        )));
    }
    Ok(())
}

struct MetricsWriter {
    w: BufWriter<fs::File>,
    path: PathBuf,
    last_step: Option<usize>,
}

impl MetricsWriter {
    fn create(path: PathBuf) -> Result<MetricsWriter> {
        let f = fs::File::create(&path)?;
        let mut w = BufWriter::new(f);
        writeln!(w, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { w, path, last_step: None })
    }

    fn row(
        &mut self,
        step: usize,
        epoch: usize,
        report: &LossReport,
        lr: f64,
        seconds: f64,
    ) -> Result<()> {
        if let Some(prev) = self.last_step {
            assert!(step > prev, "metrics steps must increase");
        }
        self.last_step = Some(step);
        writeln!(
            self.w,
            "{step},{epoch},{:.9e},{:.9e},{:.9e},{:.9e},{seconds:.3}",
            report.total, report.spatial, report.motion, lr
        )?;
        Ok(())
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.w.flush()?;
        Ok(self.path)
    }
}

fn save_checkpoint(
    path: &Path,
    plan_json: &str,
    params: &Params<f32>,
    adam: &AdamW,
    step: usize,
    next_epoch: usize,
) -> Result<()> {
    let config = render_config(&[
        ("kind".into(), "pretrain".into()),
        ("plan".into(), plan_json.to_string()),
        ("progress.step".into(), step.to_string()),
        ("progress.epoch".into(), next_epoch.to_string()),
        ("optimizer.t".into(), adam.t.to_string()),
    ])?;
    let adam_names: Vec<(String, String)> = (0..params.len())
        .map(|i| (format!("adam.m.{}", params.name(i)), format!("adam.v.{}", params.name(i))))
        .collect();
    let mut tensors = params_tensors(params);
    for i in 0..params.len() {
        tensors.push((adam_names[i].0.as_str(), params.shape(i), adam.moment1(i)));
        tensors.push((adam_names[i].1.as_str(), params.shape(i), adam.moment2(i)));
    }
    write_checkpoint(path, &config, &tensors)
}

fn find_tensor<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a NamedTensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor '{name}'")))
}

fn load_checkpoint_state(
    path: &Path,
    plan_json: &str,
    params: &mut Params<f32>,
    adam: &mut AdamW,
) -> Result<(usize, usize)> {
    let (config, tensors) = read_checkpoint(path)?;
    let map = parse_config(&config)?;
    match map.get("kind").map(String::as_str) {
        Some("pretrain") => {}
        other => {
            return Err(Error::Data(format!(
                "checkpoint kind is {other:?}, expected \"pretrain\""
            )))
        }
    }
    match map.get("plan") {
        Some(stored) if stored == plan_json => {}
        Some(_) => {
            return Err(Error::Config(
                "checkpoint was written under a different plan; resuming would not reproduce a fresh run".into(),
            ))
        }
        None => return Err(Error::Data("checkpoint carries no plan".into())),
    }
    checkpoint::load_params(params, &tensors)?;
    for i in 0..params.len() {
        let m = find_tensor(&tensors, &format!("adam.m.{}", params.name(i)))?;
        let v = find_tensor(&tensors, &format!("adam.v.{}", params.name(i)))?;
        adam.load_moments(i, &m.data, &v.data)?;
    }
    let parse_usize = |key: &str| -> Result<usize> {
        map.get(key)
            .ok_or_else(|| Error::Data(format!("checkpoint config is missing {key}")))?
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("checkpoint config {key} is not an integer")))
    };
    adam.t = parse_usize("optimizer.t")? as u64;
    Ok((parse_usize("progress.step")?, parse_usize("progress.epoch")?))
}

fn batch_bundles(
    resolved: &ResolvedPlan,
    chunk: &[usize],
    external: Option<&ExternalClips<'_>>,
) -> Result<Vec<ClipBundle>> {
    let tracking = resolved.need_tracks.then_some(&resolved.plan.tracking);
    let mut bundles = Vec::with_capacity(chunk.len());
    for &idx in chunk {
        let generated;
        let clip = match external {
            Some(e) => &e.clips[idx],
            None => {
                generated = resolved.plan.data.clip(idx)?;
                &generated
            }
        };
        let file_tracks = external.and_then(|e| e.tracks).map(|t| &t[idx]);
        bundles.push(clip_bundle(clip, idx, &resolved.plan.tokenizer, tracking, file_tracks)?);
    }
    Ok(bundles)
}

fn mask_seeds(seed: u64, epoch: usize, count: usize, chunk: &[usize]) -> Vec<u64> {
    chunk
        .iter()
        .map(|&idx| rng::stream(seed, "mask", (epoch * count + idx) as u64).gen::<u64>())
        .collect()
}

/// Runs (or resumes) pretraining, writing `metrics.csv` and
/// `checkpoint.tmck` into `out_dir`.
pub fn pretrain(
    plan: &PretrainPlan,
    out_dir: &Path,
    resume: Option<&Path>,
    external: Option<&ExternalClips<'_>>,
) -> Result<PretrainOutcome> {
    let resolved = plan.resolve()?;
    if let Some(e) = external {
        if e.clips.len() != plan.data.clip_count {
            return Err(Error::Input(format!(
                "{} external clips for a plan over {}",
                e.clips.len(),
                plan.data.clip_count
            )));
        }
        if let Some(t) = e.tracks {
            if t.len() != e.clips.len() {
                return Err(Error::Input(format!(
                    "{} track sets for {} clips",
                    t.len(),
                    e.clips.len()
                )));
            }
        }
    }
    fs::create_dir_all(out_dir)?;
    let plan_json = resolved.plan.canonical_json();
    let train = &resolved.plan.train;

    let mut params = resolved.model.init_params(train.seed);
    let mut adam = AdamW::new(&params, train.beta1, train.beta2, train.weight_decay);
    let motion_on = resolved.plan.loss.motion_active();
    let active: Vec<bool> =
        (0..params.len()).map(|i| motion_on || !motion_branch_tensor(params.name(i))).collect();
    let lambda = if motion_on { resolved.plan.loss.lambda } else { 0.0 };

    let (mut step, mut start_epoch) = (0usize, 0usize);
    if let Some(r) = resume {
        let (s, e) = load_checkpoint_state(r, &plan_json, &mut params, &mut adam)?;
        step = s;
        start_epoch = e;
    }

    let mut grads = GradStore::<f32>::zeroed(&params);
    let mut metrics = MetricsWriter::create(out_dir.join("metrics.csv"))?;
    let checkpoint_path = out_dir.join("checkpoint.tmck");
    let started = Instant::now();
    let (mut first_loss, mut final_loss) = (f64::NAN, f64::NAN);
    let count = resolved.plan.data.clip_count;

    for epoch in start_epoch..train.epochs {
        let order = epoch_order(resolved.plan.data.seed, epoch, count);
        for chunk in order.chunks(train.batch_size) {
            let bundles = batch_bundles(&resolved, chunk, external)?;
            let seeds = mask_seeds(train.seed, epoch, count, chunk);
            let batch: StepBatch<f32> =
                assemble_batch(bundles, &resolved.targeter, &resolved.plan.masking, &seeds)?;
            let report = step_forward_backward(&resolved.model, &params, &batch, lambda, &mut grads)?;
            check_finite_loss(&report, step)?;
            let lr = learning_rate(train.base_lr, resolved.warmup_steps, resolved.total_steps, step);
            adam.step(&mut params, &grads, lr, &active);
            grads.zero_all();
            metrics.row(step, epoch, &report, lr, started.elapsed().as_secs_f64())?;
            if first_loss.is_nan() {
                first_loss = report.total;
            }
            final_loss = report.total;
            step += 1;
        }
        let done = epoch + 1;
        if train.checkpoint_every > 0 && done % train.checkpoint_every == 0 && done < train.epochs {
            let p = out_dir.join(format!("checkpoint-epoch{done:04}.tmck"));
            save_checkpoint(&p, &plan_json, &params, &adam, step, done)?;
        }
    }

    save_checkpoint(&checkpoint_path, &plan_json, &params, &adam, step, train.epochs)?;
    let metrics_path = metrics.finish()?;
    Ok(PretrainOutcome {
        steps: step,
        first_loss,
        final_loss,
        checkpoint: checkpoint_path,
        metrics: metrics_path,
    })
}

/// Reloads a pretraining checkpoint: the stored plan, the model built
/// from it, and its parameters.
pub fn load_pretrained(path: &Path) -> Result<(PretrainPlan, VideoModel, Params<f32>)> {
    let (config, tensors) = read_checkpoint(path)?;
    let map = parse_config(&config)?;
    let plan_json = map
        .get("plan")
        .ok_or_else(|| Error::Data("checkpoint carries no plan".into()))?;
    let plan: PretrainPlan = serde_json::from_str(plan_json)
        .map_err(|e| Error::Data(format!("checkpoint plan does not parse: {e}")))?;
    let resolved = plan.resolve()?;
    let mut params = resolved.model.zeroed_params::<f32>();
    checkpoint::load_params(&mut params, &tensors)?;
    let ResolvedPlan { plan, model, .. } = resolved;
    Ok((plan, model, params))
}

/// Optimization sanity mode: one fixed batch (the first `batch_size`
/// clips, masks drawn once and frozen), stepped `steps` times under a
/// short warmup and cosine decay at `lr`. Returns (first, last) loss.
pub fn overfit_single_batch(plan: &PretrainPlan, steps: usize, lr: f64) -> Result<(f64, f64)> {
    if steps == 0 {
        return Err(Error::Config("overfit run needs at least one step".into()));
    }
    let resolved = plan.resolve()?;
    let train = &resolved.plan.train;
    let count = resolved.plan.data.clip_count;
    let chunk: Vec<usize> = (0..train.batch_size.min(count)).collect();
    let bundles = batch_bundles(&resolved, &chunk, None)?;
    let seeds = mask_seeds(train.seed, 0, count, &chunk);
    let batch = assemble_batch(bundles, &resolved.targeter, &resolved.plan.masking, &seeds)?;

    let mut params = resolved.model.init_params(train.seed);
    let mut adam = AdamW::new(&params, train.beta1, train.beta2, train.weight_decay);
    let motion_on = resolved.plan.loss.motion_active();
    let active: Vec<bool> =
        (0..params.len()).map(|i| motion_on || !motion_branch_tensor(params.name(i))).collect();
    let lambda = if motion_on { resolved.plan.loss.lambda } else { 0.0 };
    let mut grads = GradStore::<f32>::zeroed(&params);
    let warmup = (steps / 25).max(1);
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    for s in 0..steps {
        let report = step_forward_backward(&resolved.model, &params, &batch, lambda, &mut grads)?;
        check_finite_loss(&report, s)?;
        adam.step(&mut params, &grads, learning_rate(lr, warmup, steps, s), &active);
        grads.zero_all();
        if s == 0 {
            first = report.total;
        }
        last = report.total;
    }
    Ok((first, last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskStrategy;
    use crate::synth::ClipShape;

    fn tiny_plan() -> PretrainPlan {
        let mut plan = PretrainPlan::default();
        plan.data = DataConfig {
            shape: ClipShape { frames: 4, height: 32, width: 32, channels: 1 },
            clip_count: 8,
            seed: 11,
            ..DataConfig::default()
        };
        plan.tokenizer = TokenizerConfig { tubelet_depth: 2, patch: 16, dim: 16 };
        plan.model.enc_depth = 1;
        plan.model.enc_heads = 2;
        plan.model.dec_dim = 12;
        plan.model.dec_depth = 1;
        plan.model.dec_heads = 2;
        plan.tracking.upsample = 1;
        plan.masking.mask_ratio = 0.5;
        plan.train.batch_size = 4;
        plan.train.epochs = 2;
        plan.train.warmup_epochs = 1;
        plan.train.seed = 3;
        plan
    }

    fn read_named(path: &Path) -> Vec<NamedTensor> {
        read_checkpoint(path).unwrap().1
    }

    #[test]
    fn resolve_derives_model_widths_from_data() {
        let plan = tiny_plan();
        let r = plan.resolve().unwrap();
        assert_eq!(r.plan.model.raw_len, 512);
        assert_eq!(r.plan.model.spatial_out, 512);
        assert_eq!(r.plan.model.motion_out, 2);
        assert_eq!(r.steps_per_epoch, 2);
        assert_eq!(r.total_steps, 4);
    }

    #[test]
    fn motion_loss_without_decoder_is_rejected() {
        let mut plan = tiny_plan();
        plan.model.motion_enabled = false;
        assert!(matches!(plan.resolve(), Err(Error::Config(_))));
        plan.loss.motion_enabled = false;
        plan.resolve().unwrap();
    }

    #[test]
    fn misaligned_tracker_stride_is_rejected() {
        let mut plan = tiny_plan();
        plan.tracking.tracker.stride = 1;
        assert!(matches!(plan.resolve(), Err(Error::Config(_))));
        // Without any track consumer the stride is irrelevant.
        plan.loss.motion_enabled = false;
        plan.masking.strategy = MaskStrategy::RandomTube;
        plan.resolve().unwrap();
    }

    #[test]
    fn non_finite_loss_aborts_with_step_and_components() {
        let report = LossReport {
            spatial: f64::INFINITY,
            motion: 0.5,
            lambda: 1.0,
            total: f64::INFINITY,
            masked_tokens: 10,
        };
        match check_finite_loss(&report, 37) {
            Err(Error::Numeric(msg)) => {
                assert!(msg.contains("step 37"), "{msg}");
                assert!(msg.contains("spatial"), "{msg}");
                assert!(msg.contains("motion"), "{msg}");
            }
            other => panic!("expected numeric abort, got {other:?}"),
        }
        check_finite_loss(
            &LossReport { spatial: 0.1, motion: 0.2, lambda: 1.0, total: 0.3, masked_tokens: 1 },
            0,
        )
        .unwrap();
    }

    #[test]
    fn pretraining_runs_and_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = pretrain(&tiny_plan(), dir.path(), None, None).unwrap();
        assert_eq!(out.steps, 4);
        assert!(out.first_loss.is_finite() && out.final_loss.is_finite());
        let metrics = fs::read_to_string(&out.metrics).unwrap();
        let mut lines = metrics.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert_eq!(lines.count(), 4);
        assert!(out.checkpoint.exists());
        let (plan_back, _model, params) = load_pretrained(&out.checkpoint).unwrap();
        assert_eq!(plan_back.train.epochs, 2);
        assert!(params.all_finite());
    }

    #[test]
    fn identical_seeds_give_identical_metrics_modulo_wall_clock() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = pretrain(&tiny_plan(), d1.path(), None, None).unwrap();
        let b = pretrain(&tiny_plan(), d2.path(), None, None).unwrap();
        let strip = |p: &Path| -> Vec<String> {
            fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| l.rsplit_once(',').map(|(head, _secs)| head.to_string()).unwrap())
                .collect()
        };
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run_bit_for_bit() {
        let full_dir = tempfile::tempdir().unwrap();
        let part_dir = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan();
        plan.train.epochs = 3;
        plan.train.checkpoint_every = 1;
        let full = pretrain(&plan, full_dir.path(), None, None).unwrap();

        // Restart from the epoch-2 snapshot of a second, identical run
        // and finish the last epoch.
        let partial = pretrain(&plan, part_dir.path(), None, None).unwrap();
        let _ = partial;
        let snap = part_dir.path().join("checkpoint-epoch0002.tmck");
        assert!(snap.exists());
        let resumed_dir = tempfile::tempdir().unwrap();
        let resumed = pretrain(&plan, resumed_dir.path(), Some(&snap), None).unwrap();

        let a = read_named(&full.checkpoint);
        let b = read_named(&resumed.checkpoint);
        assert_eq!(a.len(), b.len());
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.name, tb.name);
            let bits_a: Vec<u32> = ta.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "tensor {} diverged after resume", ta.name);
        }
    }

    #[test]
    fn resume_rejects_a_different_plan() {
        let dir = tempfile::tempdir().unwrap();
        let out = pretrain(&tiny_plan(), dir.path(), None, None).unwrap();
        let mut other = tiny_plan();
        other.train.base_lr *= 2.0;
        let resumed_dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            pretrain(&other, resumed_dir.path(), Some(&out.checkpoint), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_lambda_trajectory_ignores_motion_decoder_existence() {
        // Same seeds, motion decoder present vs absent: every shared
        // tensor must follow the identical trajectory when lambda = 0.
        let mut with = tiny_plan();
        with.loss.lambda = 0.0;
        with.masking.strategy = MaskStrategy::RandomTube;
        let mut without = with.clone();
        without.model.motion_enabled = false;
        without.loss.motion_enabled = false;

        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = pretrain(&with, d1.path(), None, None).unwrap();
        let b = pretrain(&without, d2.path(), None, None).unwrap();
        let ta = read_named(&a.checkpoint);
        let tb = read_named(&b.checkpoint);
        // Every tensor of the decoder-less model exists in the other run
        // with bit-identical values; the motion tensors are extra.
        for t in &tb {
            let m = ta.iter().find(|x| x.name == t.name).expect("shared tensor");
            let bits_a: Vec<u32> = m.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "tensor {} differs", t.name);
        }
        assert!(ta.iter().any(|t| t.name.starts_with("dec.motion.")));
        assert!(!tb.iter().any(|t| t.name.starts_with("dec.motion.")));
    }

    #[test]
    fn overfitting_a_fixed_batch_reduces_the_loss() {
        let mut plan = tiny_plan();
        plan.train.batch_size = 4;
        let (first, last) = overfit_single_batch(&plan, 60, 2e-3).unwrap();
        assert!(last < first, "loss did not drop: {first} -> {last}");
    }
}
