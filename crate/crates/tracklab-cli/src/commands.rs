//! The seven subcommands. Each one loads the run configuration (file
//! plus flag overrides), validates it, writes the resolved form next to
//! its outputs, then drives the core pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use ndarray::Array2;
use tracklab_core::error::{Error, Result};
use tracklab_core::masking::{MaskStrategy, sample_mask};
use tracklab_core::model::DecoderMode;
use tracklab_core::objectives::SpatialMode;
use tracklab_core::synth::shard::{ShardManifest, ShardReader, ShardWriter};
use tracklab_core::synth::{APPEARANCE_CLASSES, MOTION_CLASSES};
use tracklab_core::tracks::{NoiseMode, TrackSet, read_tracks, write_tracks};
use tracklab_core::training::data::{TrackNoise, clip_tracks};
use tracklab_core::training::pretrain::{ExternalClips, METRICS_HEADER, pretrain};
use tracklab_core::training::probe::{ProbeTask, finetune, linear_probe};

use crate::config::RunConfig;
use crate::render::{Series, line_chart};

const SHARD_FILE: &str = "clips.tmvc";
const CONFIG_FILE: &str = "config.toml";

/// Flags shared by every experiment-shaped subcommand, one per ablation
/// axis. Anything not given on the command line falls back to the
/// config file, then to the defaults.
#[derive(Args, Debug)]
pub struct AblationFlags {
    /// Spatial reconstruction target: pixel | feature
    #[arg(long)]
    targets: Option<String>,
    /// Enable or disable the motion objective
    #[arg(long)]
    with_motion: Option<bool>,
    /// Masking strategy (random_tube, motion_bins, bernoulli_highlow, sorting, uniform_topk, exclude_topk)
    #[arg(long)]
    strategy: Option<String>,
    /// Overall mask ratio in (0, 1)
    #[arg(long)]
    rho: Option<f64>,
    /// Fraction of the visible quota drawn from the high-motion bin
    #[arg(long)]
    rho_motion: Option<f64>,
    /// Tracking grid factor (queries per patch side)
    #[arg(long)]
    grid: Option<usize>,
    /// Motion-target interpolation factor
    #[arg(long)]
    upsample: Option<usize>,
    /// Motion loss weight
    #[arg(long)]
    lambda: Option<f64>,
    /// Decoder layout: separate | joint
    #[arg(long)]
    decoder: Option<String>,
    /// Track noise as MODE SIGMA, e.g. --noise spatial 1.0
    #[arg(long, num_args = 2, value_names = ["MODE", "SIGMA"])]
    noise: Option<Vec<String>>,
}

impl AblationFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(t) = &self.targets {
            cfg.loss.spatial = match (t.as_str(), cfg.loss.spatial) {
                ("pixel", _) => SpatialMode::Pixel,
                // "feature" keeps an already-configured teacher kind.
                ("feature", SpatialMode::Pixel) => SpatialMode::FrozenProjection,
                ("feature", other) => other,
                (other, _) => {
                    return Err(Error::Config(format!(
                        "unknown target kind '{other}' (expected pixel or feature)"
                    )));
                }
            };
        }
        if let Some(m) = self.with_motion {
            cfg.loss.motion_enabled = m;
            cfg.model.motion_enabled = m;
        }
        if let Some(s) = &self.strategy {
            cfg.masking.strategy = MaskStrategy::parse(s)?;
        }
        if let Some(r) = self.rho {
            cfg.masking.mask_ratio = r;
        }
        if let Some(r) = self.rho_motion {
            cfg.masking.motion_ratio = r;
        }
        if let Some(g) = self.grid {
            cfg.tracker.tracker.grid_factor = g;
        }
        if let Some(u) = self.upsample {
            cfg.tracker.upsample = u;
        }
        if let Some(l) = self.lambda {
            cfg.loss.lambda = l;
        }
        if let Some(d) = &self.decoder {
            cfg.model.decoder_mode = match d.as_str() {
                "separate" => DecoderMode::Separate,
                "joint" => DecoderMode::Joint,
                other => {
                    return Err(Error::Config(format!(
                        "unknown decoder layout '{other}' (expected separate or joint)"
                    )));
                }
            };
        }
        if let Some(n) = &self.noise {
            cfg.tracker.noise = Some(parse_noise(n)?);
        }
        Ok(())
    }
}

fn parse_noise(words: &[String]) -> Result<TrackNoise> {
    let mode = match words[0].as_str() {
        "spatial" => NoiseMode::Spatial,
        "temporal" => NoiseMode::Temporal,
        other => {
            return Err(Error::Config(format!(
                "unknown noise mode '{other}' (expected spatial or temporal)"
            )));
        }
    };
    let sigma: f64 = words[1]
        .parse()
        .map_err(|_| Error::Config(format!("noise sigma '{}' is not a number", words[1])))?;
    Ok(TrackNoise { mode, sigma })
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))
}

/// Accepts either the shard file itself or a gen-data output directory.
fn locate_shard(path: &Path) -> PathBuf {
    if path.is_dir() { path.join(SHARD_FILE) } else { path.to_path_buf() }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Run configuration file (defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for shard, manifest, and resolved config
    #[arg(long)]
    out: PathBuf,
    /// Override data.clip_count
    #[arg(long)]
    count: Option<usize>,
    /// Override data.seed
    #[arg(long)]
    seed: Option<u64>,
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(c) = a.count {
        cfg.data.clip_count = c;
    }
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    cfg.data.validate()?;
    ensure_dir(&a.out)?;
    cfg.emit(&a.out.join(CONFIG_FILE))?;

    let shard_path = a.out.join(SHARD_FILE);
    let mut writer = ShardWriter::create(&shard_path)?;
    let mut appearance = vec![0usize; APPEARANCE_CLASSES];
    let mut motion = vec![0usize; MOTION_CLASSES];
    for i in 0..cfg.data.clip_count {
        let clip = cfg.data.clip(i)?;
        appearance[clip.appearance_label as usize] += 1;
        motion[clip.motion_label as usize] += 1;
        writer.push(&clip)?;
    }
    let clips = writer.finish()?;
    ShardManifest {
        clips,
        seed: cfg.data.seed,
        frames: cfg.data.shape.frames,
        height: cfg.data.shape.height,
        width: cfg.data.shape.width,
        channels: cfg.data.shape.channels,
        appearance_histogram: appearance,
        motion_histogram: motion,
        shard_file: SHARD_FILE.into(),
    }
    .save(&a.out.join("manifest.json"))?;
    println!("wrote {clips} clips to {}", shard_path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrackArgs {
    /// Clip shard (file or gen-data output directory)
    #[arg(long)]
    shard: PathBuf,
    /// Output directory for track files and resolved config
    #[arg(long)]
    out: PathBuf,
    /// Run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override tracker grid factor
    #[arg(long)]
    grid: Option<usize>,
    /// Override tracker frame stride
    #[arg(long)]
    stride: Option<usize>,
    /// Track noise as MODE SIGMA
    #[arg(long, num_args = 2, value_names = ["MODE", "SIGMA"])]
    noise: Option<Vec<String>>,
}

pub fn track(a: &TrackArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(g) = a.grid {
        cfg.tracker.tracker.grid_factor = g;
    }
    if let Some(s) = a.stride {
        cfg.tracker.tracker.stride = s;
    }
    if let Some(n) = &a.noise {
        cfg.tracker.noise = Some(parse_noise(n)?);
    }
    cfg.tracker.validate()?;
    let mut reader = ShardReader::open(&locate_shard(&a.shard))?;
    ensure_dir(&a.out)?;
    cfg.emit(&a.out.join(CONFIG_FILE))?;
    for i in 0..reader.clip_count() {
        let clip = reader.read_clip(i)?;
        let tracks = clip_tracks(&clip, &cfg.tracker, i, cfg.tokenizer.patch)?;
        write_tracks(&a.out.join(format!("track-{i:05}.trkm")), &tracks)?;
    }
    println!("wrote {} track files to {}", reader.clip_count(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint, metrics, and resolved config
    #[arg(long)]
    out: PathBuf,
    /// Pretrain on this clip shard instead of generating clips on the fly
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory of track files aligned with --data (one per clip)
    #[arg(long)]
    tracks: Option<PathBuf>,
    /// Resume from an intermediate checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override train.epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Override data.clip_count (generated data only)
    #[arg(long)]
    clips: Option<usize>,
    /// Override train.batch_size
    #[arg(long)]
    batch: Option<usize>,
    /// Override train.seed (init + masks)
    #[arg(long)]
    seed: Option<u64>,
    /// Override data.seed (clip content + order)
    #[arg(long)]
    data_seed: Option<u64>,
    #[command(flatten)]
    ablation: AblationFlags,
}

fn read_track_dir(dir: &Path, expected: usize) -> Result<Vec<TrackSet>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read track dir {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "trkm"))
        .collect();
    files.sort();
    if files.len() != expected {
        return Err(Error::Data(format!(
            "{} track files for {expected} clips in {}",
            files.len(),
            dir.display()
        )));
    }
    files.iter().map(|p| read_tracks(p)).collect()
}

pub fn run_pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    a.ablation.apply(&mut cfg)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(c) = a.clips {
        cfg.data.clip_count = c;
    }
    if let Some(b) = a.batch {
        cfg.train.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = a.data_seed {
        cfg.data.seed = s;
    }

    let mut clips = Vec::new();
    let mut track_sets = None;
    if let Some(shard) = &a.data {
        let mut reader = ShardReader::open(&locate_shard(shard))?;
        if reader.clip_count() == 0 {
            return Err(Error::Data("shard holds no clips".into()));
        }
        // The shard defines the data: shape and count follow it.
        cfg.data.shape = reader.shape(0)?;
        cfg.data.clip_count = reader.clip_count();
        for i in 0..reader.clip_count() {
            clips.push(reader.read_clip(i)?);
        }
        if let Some(tdir) = &a.tracks {
            track_sets = Some(read_track_dir(tdir, clips.len())?);
        }
    } else if a.tracks.is_some() {
        return Err(Error::Config("--tracks requires --data".into()));
    }

    let plan = cfg.plan();
    plan.resolve()?;
    ensure_dir(&a.out)?;
    cfg.emit(&a.out.join(CONFIG_FILE))?;
    let external = (!clips.is_empty())
        .then(|| ExternalClips { clips: &clips, tracks: track_sets.as_deref() });
    let outcome = pretrain(&plan, &a.out, a.resume.as_deref(), external.as_ref())?;
    println!(
        "pretrained {} steps, loss {:.6} -> {:.6}",
        outcome.steps, outcome.first_loss, outcome.final_loss
    );
    println!("checkpoint {}", outcome.checkpoint.display());
    println!("metrics {}", outcome.metrics.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Pretrained checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for the result and resolved config
    #[arg(long)]
    out: PathBuf,
    /// Run configuration file (probe section only; the checkpoint fixes the rest)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Probe task: appearance | motion
    #[arg(long)]
    task: Option<String>,
    /// Override probe.epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Override probe.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override probe.train_clips
    #[arg(long)]
    train_clips: Option<usize>,
    /// Override probe.eval_clips
    #[arg(long)]
    eval_clips: Option<usize>,
}

impl ProbeArgs {
    fn probe_config(&self) -> Result<tracklab_core::training::probe::ProbeConfig> {
        let mut probe = RunConfig::load(self.config.as_deref())?.probe;
        if let Some(t) = &self.task {
            probe.task = ProbeTask::parse(t)?;
        }
        if let Some(e) = self.epochs {
            probe.epochs = e;
        }
        if let Some(s) = self.seed {
            probe.seed = s;
        }
        if let Some(n) = self.train_clips {
            probe.train_clips = n;
        }
        if let Some(n) = self.eval_clips {
            probe.eval_clips = n;
        }
        probe.validate()?;
        Ok(probe)
    }
}

pub fn run_probe(a: &ProbeArgs) -> Result<()> {
    let (plan, model, params) = tracklab_core::training::pretrain::load_pretrained(&a.checkpoint)?;
    let probe = a.probe_config()?;
    ensure_dir(&a.out)?;
    RunConfig::from_plan(&plan, probe.clone()).emit(&a.out.join(CONFIG_FILE))?;
    let outcome =
        linear_probe(&model, &params, &plan.tokenizer, &plan.data.shape, &plan.data.scene, &probe)?;
    let report = serde_json::json!({
        "task": probe.task.name(),
        "accuracy": outcome.accuracy,
        "train_accuracy": outcome.train_accuracy,
        "train_clips": probe.train_clips,
        "eval_clips": probe.eval_clips,
        "seed": probe.seed,
    });
    fs::write(a.out.join("probe.json"), serde_json::to_string_pretty(&report).unwrap())?;
    println!(
        "probe {} top-1 {:.4} (train {:.4})",
        probe.task.name(),
        outcome.accuracy,
        outcome.train_accuracy
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    probe: ProbeArgs,
    /// Unfrozen training epochs (0 keeps the probe-initialized model)
    #[arg(long, default_value_t = 10)]
    ft_epochs: usize,
    /// Encoder learning rate during finetuning
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Decoupled weight decay during finetuning
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
}

pub fn run_finetune(a: &FinetuneArgs) -> Result<()> {
    let (plan, model, mut params) =
        tracklab_core::training::pretrain::load_pretrained(&a.probe.checkpoint)?;
    let probe = a.probe.probe_config()?;
    ensure_dir(&a.probe.out)?;
    RunConfig::from_plan(&plan, probe.clone()).emit(&a.probe.out.join(CONFIG_FILE))?;
    let accuracy = finetune(
        &model,
        &mut params,
        &plan.tokenizer,
        &plan.data.shape,
        &plan.data.scene,
        &probe,
        a.ft_epochs,
        a.lr,
        a.weight_decay,
    )?;
    let report = serde_json::json!({
        "task": probe.task.name(),
        "accuracy": accuracy,
        "epochs": a.ft_epochs,
        "lr": a.lr,
        "weight_decay": a.weight_decay,
        "seed": probe.seed,
    });
    fs::write(a.probe.out.join("finetune.json"), serde_json::to_string_pretty(&report).unwrap())?;
    println!("finetune {} top-1 {:.4}", probe.task.name(), accuracy);
    Ok(())
}

#[derive(Args, Debug)]
pub struct MaskStatsArgs {
    /// Output directory for the heatmap and resolved config
    #[arg(long)]
    out: PathBuf,
    /// Run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override masking strategy
    #[arg(long)]
    strategy: Option<String>,
    /// Override mask ratio
    #[arg(long)]
    rho: Option<f64>,
    /// Override motion ratio
    #[arg(long)]
    rho_motion: Option<f64>,
    /// Number of mask draws
    #[arg(long, default_value_t = 100_000)]
    seeds: u64,
    /// First draw seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Per-cell visible frequency under a uniform saliency map. A correct
/// sampler leaves no spatial preference, so the heatmap is flat up to
/// Monte-Carlo noise.
pub fn mask_stats(a: &MaskStatsArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = &a.strategy {
        cfg.masking.strategy = MaskStrategy::parse(s)?;
    }
    if let Some(r) = a.rho {
        cfg.masking.mask_ratio = r;
    }
    if let Some(r) = a.rho_motion {
        cfg.masking.motion_ratio = r;
    }
    cfg.masking.validate()?;
    if a.seeds == 0 {
        return Err(Error::Config("mask-stats needs at least one draw".into()));
    }
    let grid = cfg.tokenizer.grid(&cfg.data.shape)?;
    let saliency = Array2::<f64>::ones((grid.rows, grid.cols));
    let mut visible = Array2::<u64>::zeros((grid.rows, grid.cols));
    let mut token_draws = 0u64;
    for s in 0..a.seeds {
        let mask = sample_mask(&cfg.masking, &grid, Some(&saliency), a.seed.wrapping_add(s))?;
        for &t in &mask.visible_tokens {
            let (_, r, c) = grid.unflatten(t);
            visible[[r, c]] += 1;
        }
        token_draws += grid.slots as u64;
    }

    ensure_dir(&a.out)?;
    cfg.emit(&a.out.join(CONFIG_FILE))?;
    let freq = visible.mapv(|v| v as f64 / token_draws as f64);
    let mut csv = String::new();
    for r in 0..grid.rows {
        let row: Vec<String> = (0..grid.cols).map(|c| format!("{:.6}", freq[[r, c]])).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    fs::write(a.out.join("heatmap.csv"), csv)?;
    let max = freq.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = freq.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "strategy {} over {} draws: visible frequency max {:.5} min {:.5} ratio {:.4}",
        cfg.masking.strategy.name(),
        a.seeds,
        max,
        min,
        max / min
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Metrics CSV written by pretrain
    #[arg(long)]
    metrics: PathBuf,
    /// Output directory for loss.png and lr.png
    #[arg(long)]
    out: PathBuf,
}

pub fn plot(a: &PlotArgs) -> Result<()> {
    let text = fs::read_to_string(&a.metrics)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", a.metrics.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "metrics header mismatch: expected '{METRICS_HEADER}', got '{}'",
                other.unwrap_or("")
            )));
        }
    }
    let mut loss = Vec::new();
    let mut spatial = Vec::new();
    let mut motion = Vec::new();
    let mut lr = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Data(format!("metrics row {} has {} fields", i + 2, fields.len())));
        }
        let num = |j: usize| -> Result<f64> {
            fields[j].parse().map_err(|_| {
                Error::Data(format!("metrics row {}: '{}' is not a number", i + 2, fields[j]))
            })
        };
        let step = num(0)?;
        loss.push((step, num(2)?));
        spatial.push((step, num(3)?));
        motion.push((step, num(4)?));
        lr.push((step, num(5)?));
    }
    if loss.is_empty() {
        return Err(Error::Data("metrics file holds no rows".into()));
    }
    ensure_dir(&a.out)?;
    let loss_png = a.out.join("loss.png");
    let lr_png = a.out.join("lr.png");
    line_chart(
        &loss_png,
        &[
            Series { color: [0x20, 0x20, 0x20], points: &loss },
            Series { color: [0x1f, 0x77, 0xb4], points: &spatial },
            Series { color: [0xd6, 0x27, 0x28], points: &motion },
        ],
    )?;
    line_chart(&lr_png, &[Series { color: [0x2c, 0xa0, 0x2c], points: &lr }])?;
    println!("wrote {} and {}", loss_png.display(), lr_png.display());
    Ok(())
}
