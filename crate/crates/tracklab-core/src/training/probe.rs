//! Evaluation heads: linear probing of a frozen encoder and end-to-end
//! finetuning, both over held-out synthetic splits.
//!
//! The probe representation is the mean over all encoder tokens with
//! every token visible; no masking is involved at evaluation time.

use crate::error::{Error, Result};
use crate::model::params::{GradStore, Params};
use crate::model::VideoModel;
use crate::rng;
use crate::synth::{ClipShape, SceneConfig, VideoClip, generate_stratified_clip};
use crate::tokenizer::{TokenizerConfig, patchify};
use crate::training::data::epoch_order;
use crate::training::optim::AdamW;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    Appearance,
    Motion,
}

impl ProbeTask {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeTask::Appearance => "appearance",
            ProbeTask::Motion => "motion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "appearance" => Ok(ProbeTask::Appearance),
            "motion" => Ok(ProbeTask::Motion),
            other => Err(Error::Config(format!("unknown probe task '{other}'"))),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ProbeTask::Appearance => crate::synth::APPEARANCE_CLASSES,
            ProbeTask::Motion => crate::synth::MOTION_CLASSES,
        }
    }

    fn label(&self, clip: &VideoClip) -> u32 {
        match self {
            ProbeTask::Appearance => clip.appearance_label,
            ProbeTask::Motion => clip.motion_label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub task: ProbeTask,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_clips: usize,
    pub eval_clips: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            task: ProbeTask::Motion,
            epochs: 40,
            lr: 1e-3,
            batch_size: 64,
            train_clips: 512,
            eval_clips: 256,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("probe batch size must be at least 1".into()));
        }
        if self.train_clips == 0 || self.eval_clips == 0 {
            return Err(Error::Config("probe needs nonempty train and eval splits".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("probe lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Clip `index` of a probe split. Splits draw from masters derived off
/// the probe seed, so they are independent of each other and of the
/// pretraining set.
pub fn split_clip(
    seed: u64,
    split: &str,
    index: usize,
    shape: &ClipShape,
    scene: &SceneConfig,
) -> Result<VideoClip> {
    let master = rng::stream(seed, split, 0).gen::<u64>();
    generate_stratified_clip(master, index as u64, shape, scene)
}

/// Frozen-encoder representations: mean over all token outputs, every
/// token visible. One row per clip, f64.
pub fn encoder_features(
    model: &VideoModel,
    p: &Params<f32>,
    tok: &TokenizerConfig,
    clips: &[VideoClip],
) -> Result<Array2<f64>> {
    let d = model.cfg().embed_dim;
    let n = model.grid().tokens();
    let mut out = Array2::<f64>::zeros((clips.len(), d));
    for (chunk_start, chunk) in clips.chunks(16).enumerate().map(|(i, c)| (i * 16, c)) {
        let raws: Vec<Array2<f32>> =
            chunk.iter().map(|c| patchify::<f32>(&c.pixels, tok)).collect::<Result<_>>()?;
        let x = model.embed_all(p, &raws)?;
        let (z, _) = model.encode(p, x, chunk.len())?;
        for (b, _) in chunk.iter().enumerate() {
            let mut row = out.row_mut(chunk_start + b);
            for t in 0..n {
                for (o, &v) in row.iter_mut().zip(z.row(b * n + t).iter()) {
                    *o += v as f64;
                }
            }
            row.mapv_inplace(|v| v / n as f64);
        }
    }
    Ok(out)
}

fn generate_split(
    cfg: &ProbeConfig,
    split: &str,
    count: usize,
    shape: &ClipShape,
    scene: &SceneConfig,
) -> Result<Vec<VideoClip>> {
    (0..count).map(|i| split_clip(cfg.seed, split, i, shape, scene)).collect()
}

/// Multinomial logistic regression trained with Adam. Requires every
/// class to appear in the training labels.
pub fn train_linear_classifier(
    x: &Array2<f64>,
    y: &[u32],
    classes: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<f64>)> {
    if x.nrows() != y.len() {
        return Err(Error::Input(format!("{} feature rows for {} labels", x.nrows(), y.len())));
    }
    let mut seen = vec![false; classes];
    for &label in y {
        *seen
            .get_mut(label as usize)
            .ok_or_else(|| Error::Data(format!("label {label} outside {classes} classes")))? = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!("class {missing} is absent from the training split")));
    }

    let d = x.ncols();
    let mut w = Array2::<f64>::zeros((classes, d));
    let mut b = vec![0.0f64; classes];
    let mut opt = VecAdam::new(classes * d + classes, lr);
    let mut dw = Array2::<f64>::zeros((classes, d));
    let mut db = vec![0.0f64; classes];
    for epoch in 0..epochs {
        let order = epoch_order(seed, epoch, y.len());
        for chunk in order.chunks(batch_size) {
            dw.fill(0.0);
            db.iter_mut().for_each(|v| *v = 0.0);
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let xi = x.row(i);
                let mut logits: Vec<f64> =
                    (0..classes).map(|c| w.row(c).dot(&xi) + b[c]).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    sum += *l;
                }
                for c in 0..classes {
                    let p = logits[c] / sum;
                    let grad = (p - if c as u32 == y[i] { 1.0 } else { 0.0 }) * inv;
                    db[c] += grad;
                    let mut wrow = dw.row_mut(c);
                    for (g, &xv) in wrow.iter_mut().zip(xi.iter()) {
                        *g += grad * xv;
                    }
                }
            }
            opt.step(
                w.as_slice_mut().expect("row-major"),
                dw.as_slice().expect("row-major"),
                &mut b,
                &db,
            );
        }
    }
    Ok((w, b))
}

/// Plain Adam over one weight matrix + bias pair, f64 end to end.
struct VecAdam {
    lr: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl VecAdam {
    fn new(len: usize, lr: f64) -> VecAdam {
        VecAdam { lr, t: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    fn step(&mut self, w: &mut [f64], dw: &[f64], b: &mut [f64], db: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        let mut update = |idx: usize, value: &mut f64, grad: f64| {
            let m = B1 * self.m[idx] + (1.0 - B1) * grad;
            let v = B2 * self.v[idx] + (1.0 - B2) * grad * grad;
            self.m[idx] = m;
            self.v[idx] = v;
            *value -= self.lr * (m / bc1) / ((v / bc2).sqrt() + EPS);
        };
        for (i, (value, &grad)) in w.iter_mut().zip(dw).enumerate() {
            update(i, value, grad);
        }
        let off = w.len();
        for (i, (value, &grad)) in b.iter_mut().zip(db).enumerate() {
            update(off + i, value, grad);
        }
    }
}

pub fn classifier_accuracy(w: &Array2<f64>, b: &[f64], x: &Array2<f64>, y: &[u32]) -> f64 {
    let mut hits = 0usize;
    for (i, &label) in y.iter().enumerate() {
        let xi = x.row(i);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for c in 0..w.nrows() {
            let logit = w.row(c).dot(&xi) + b[c];
            if logit > best.0 {
                best = (logit, c);
            }
        }
        if best.1 as u32 == label {
            hits += 1;
        }
    }
    hits as f64 / y.len() as f64
}

pub struct ProbeOutcome {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub classifier_w: Array2<f64>,
    pub classifier_b: Vec<f64>,
}

/// Linear probe: freeze the encoder, train a softmax classifier on
/// mean-pooled token features, report held-out top-1.
pub fn linear_probe(
    model: &VideoModel,
    params: &Params<f32>,
    tok: &TokenizerConfig,
    shape: &ClipShape,
    scene: &SceneConfig,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    let train_set = generate_split(cfg, "probe.train", cfg.train_clips, shape, scene)?;
    let eval_set = generate_split(cfg, "probe.eval", cfg.eval_clips, shape, scene)?;
    let x_train = encoder_features(model, params, tok, &train_set)?;
    let x_eval = encoder_features(model, params, tok, &eval_set)?;
    let y_train: Vec<u32> = train_set.iter().map(|c| cfg.task.label(c)).collect();
    let y_eval: Vec<u32> = eval_set.iter().map(|c| cfg.task.label(c)).collect();
    let (w, b) = train_linear_classifier(
        &x_train,
        &y_train,
        cfg.task.classes(),
        cfg.epochs,
        cfg.lr,
        cfg.batch_size,
        cfg.seed,
    )?;
    Ok(ProbeOutcome {
        accuracy: classifier_accuracy(&w, &b, &x_eval, &y_eval),
        train_accuracy: classifier_accuracy(&w, &b, &x_train, &y_train),
        classifier_w: w,
        classifier_b: b,
    })
}

/// End-to-end finetuning: starts from the probe-trained classifier,
/// then unfreezes the encoder and trains both on the probe's train
/// split. `epochs == 0` skips the unfrozen phase entirely, returning the
/// probe-initialized accuracy unchanged.
pub fn finetune(
    model: &VideoModel,
    params: &mut Params<f32>,
    tok: &TokenizerConfig,
    shape: &ClipShape,
    scene: &SceneConfig,
    cfg: &ProbeConfig,
    epochs: usize,
    lr: f64,
    weight_decay: f64,
) -> Result<f64> {
    let probe = linear_probe(model, params, tok, shape, scene, cfg)?;
    if epochs == 0 {
        return Ok(probe.accuracy);
    }
    let train_set = generate_split(cfg, "probe.train", cfg.train_clips, shape, scene)?;
    let y_train: Vec<u32> = train_set.iter().map(|c| cfg.task.label(c)).collect();
    let (mut w, mut b) = (probe.classifier_w, probe.classifier_b);
    let classes = cfg.task.classes();
    let d = model.cfg().embed_dim;
    let n = model.grid().tokens();

    // Only tensors on the classification path move; decoders are not in
    // the graph and stay exactly as pretrained.
    let active: Vec<bool> = (0..params.len())
        .map(|i| {
            let name = params.name(i);
            name.starts_with("embed.") || name.starts_with("enc.")
        })
        .collect();
    let mut opt = AdamW::new(params, 0.9, 0.95, weight_decay);
    let mut head_opt = VecAdam::new(classes * d + classes, cfg.lr);
    let mut grads = GradStore::<f32>::zeroed(params);
    let mut dw = Array2::<f64>::zeros((classes, d));
    let mut db = vec![0.0f64; classes];

    for epoch in 0..epochs {
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        for chunk in order.chunks(cfg.batch_size) {
            let raws: Vec<Array2<f32>> = chunk
                .iter()
                .map(|&i| patchify::<f32>(&train_set[i].pixels, tok))
                .collect::<Result<_>>()?;
            let (x, etrace) = model.embed_all_traced(params, &raws)?;
            let (z, enc_cache) = model.encode(params, x, chunk.len())?;

            // Mean pool, classify, cross-entropy.
            let mut feats = Array2::<f64>::zeros((chunk.len(), d));
            for bi in 0..chunk.len() {
                let mut row = feats.row_mut(bi);
                for t in 0..n {
                    for (o, &v) in row.iter_mut().zip(z.row(bi * n + t).iter()) {
                        *o += v as f64;
                    }
                }
                row.mapv_inplace(|v| v / n as f64);
            }
            dw.fill(0.0);
            db.iter_mut().for_each(|v| *v = 0.0);
            let mut dfeat = Array2::<f64>::zeros((chunk.len(), d));
            let inv = 1.0 / chunk.len() as f64;
            for (bi, &i) in chunk.iter().enumerate() {
                let xi = feats.row(bi);
                let mut logits: Vec<f64> = (0..classes).map(|c| w.row(c).dot(&xi) + b[c]).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    sum += *l;
                }
                for c in 0..classes {
                    let p = logits[c] / sum;
                    let g = (p - if c as u32 == y_train[i] { 1.0 } else { 0.0 }) * inv;
                    db[c] += g;
                    let mut wrow = dw.row_mut(c);
                    for (gw, &xv) in wrow.iter_mut().zip(xi.iter()) {
                        *gw += g * xv;
                    }
                    let mut frow = dfeat.row_mut(bi);
                    for (df, &wv) in frow.iter_mut().zip(w.row(c).iter()) {
                        *df += g * wv;
                    }
                }
            }

            // Pool backward: every token row of a clip gets dfeat / n.
            let mut dz = Array2::<f32>::zeros((chunk.len() * n, d));
            for bi in 0..chunk.len() {
                for t in 0..n {
                    let mut row = dz.row_mut(bi * n + t);
                    for (o, &v) in row.iter_mut().zip(dfeat.row(bi).iter()) {
                        *o = (v / n as f64) as f32;
                    }
                }
            }
            let dx = model.encode_backward(params, &enc_cache, dz, chunk.len(), &mut grads);
            model.embed_backward(params, &etrace, &dx, &mut grads);
            head_opt.step(
                w.as_slice_mut().expect("row-major"),
                dw.as_slice().expect("row-major"),
                &mut b,
                &db,
            );
            opt.step(params, &grads, lr, &active);
            grads.zero_all();
        }
    }

    let eval_set = generate_split(cfg, "probe.eval", cfg.eval_clips, shape, scene)?;
    let y_eval: Vec<u32> = eval_set.iter().map(|c| cfg.task.label(c)).collect();
    let x_eval = encoder_features(model, params, tok, &eval_set)?;
    Ok(classifier_accuracy(&w, &b, &x_eval, &y_eval))
}
