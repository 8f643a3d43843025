//! Synthetic sprite videos with exact ground-truth motion.
//!
//! Each clip contains a handful of sprites whose positions follow closed
//! form motion models over a flat background that may itself move under a
//! discrete affine camera map. Because every position is analytic, clips
//! come with a dense ground-truth flow field, per-clip class labels, and
//! an exact point-track oracle, which stands in for a learned tracker.
//!
//! Conventions: positions are `(x, y)` in pixel units, where integer
//! coordinates are pixel centers; `x` runs along width, `y` along height.
//! Sprite positions refer to sprite centers. Frame index `tau` counts from
//! zero.

pub mod shard;

use crate::error::{Error, Result};
use crate::tracks::{Provenance, TrackSet};
use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Clip dimensions. `channels` is 1 (grayscale) or 3 (RGB).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClipShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for ClipShape {
    fn default() -> Self {
        ClipShape { frames: 16, height: 64, width: 64, channels: 3 }
    }
}

impl ClipShape {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("clip dimensions must be positive".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Checks divisibility by the tokenizer geometry: p | H, p | W, t | T.
    pub fn validate_for(&self, patch: usize, tubelet_depth: usize) -> Result<()> {
        self.validate()?;
        if patch == 0 || tubelet_depth == 0 {
            return Err(Error::Config("patch size and tubelet depth must be positive".into()));
        }
        if self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::Config(format!(
                "H={} and W={} must be divisible by patch size {}",
                self.height, self.width, patch
            )));
        }
        if self.frames % tubelet_depth != 0 {
            return Err(Error::Config(format!(
                "T={} must be divisible by tubelet depth {}",
                self.frames, tubelet_depth
            )));
        }
        Ok(())
    }
}

pub const SHAPE_KINDS: usize = 4;
pub const COLOR_BUCKETS: usize = 4;
pub const DIRECTION_BINS: usize = 8;
pub const SPEED_BINS: usize = 2;

/// Appearance classes: shape kind crossed with color bucket.
pub const APPEARANCE_CLASSES: usize = SHAPE_KINDS * COLOR_BUCKETS;
/// Motion classes: velocity direction bin crossed with speed bin.
pub const MOTION_CLASSES: usize = DIRECTION_BINS * SPEED_BINS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SpriteKind {
    Square,
    Disc,
    Bar,
    Cross,
}

impl SpriteKind {
    pub fn index(self) -> usize {
        match self {
            SpriteKind::Square => 0,
            SpriteKind::Disc => 1,
            SpriteKind::Bar => 2,
            SpriteKind::Cross => 3,
        }
    }

    fn from_index(i: usize) -> SpriteKind {
        match i % SHAPE_KINDS {
            0 => SpriteKind::Square,
            1 => SpriteKind::Disc,
            2 => SpriteKind::Bar,
            _ => SpriteKind::Cross,
        }
    }
}

/// How a sprite center moves over time.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum MotionModel {
    /// pos(tau) = pos0 + v * tau
    Constant,
    /// Discrete uniform acceleration: pos(tau) = pos0 + v*tau + a*tau*(tau-1)/2,
    /// i.e. the running sum of a per-frame velocity v + a*tau.
    Accelerated { accel: [f64; 2] },
    /// pos(tau) = pos0 + amp * (sin(omega*tau + phase) - sin(phase))
    Sinusoidal { amp: [f64; 2], omega: f64, phase: f64 },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpriteSpec {
    pub kind: SpriteKind,
    pub size: f64,
    /// Channel values in [0,1]; length equals the clip's channel count.
    pub color: Vec<f64>,
    pub pos0: [f64; 2],
    pub velocity: [f64; 2],
    pub motion: MotionModel,
}

impl SpriteSpec {
    /// Center position at frame `tau` (may be fractional or past the clip).
    pub fn pos(&self, tau: f64) -> [f64; 2] {
        let [x0, y0] = self.pos0;
        let [vx, vy] = self.velocity;
        match self.motion {
            MotionModel::Constant => [x0 + vx * tau, y0 + vy * tau],
            MotionModel::Accelerated { accel: [ax, ay] } => {
                let s = tau * (tau - 1.0) / 2.0;
                [x0 + vx * tau + ax * s, y0 + vy * tau + ay * s]
            }
            MotionModel::Sinusoidal { amp: [amx, amy], omega, phase } => {
                let w = (omega * tau + phase).sin() - phase.sin();
                [x0 + amx * w, y0 + amy * w]
            }
        }
    }

    /// Displacement from frame `tau` to `tau + 1`.
    pub fn flow(&self, tau: f64) -> [f64; 2] {
        let a = self.pos(tau);
        let b = self.pos(tau + 1.0);
        [b[0] - a[0], b[1] - a[1]]
    }

    /// Whether the sprite covers the pixel centered at `(x, y)` at frame `tau`.
    pub fn covers(&self, tau: f64, x: f64, y: f64) -> bool {
        let [cx, cy] = self.pos(tau);
        let dx = (x - cx).abs();
        let dy = (y - cy).abs();
        let h = self.size / 2.0;
        let thin = self.size / 6.0;
        match self.kind {
            SpriteKind::Square => dx <= h && dy <= h,
            SpriteKind::Disc => dx * dx + dy * dy <= h * h,
            SpriteKind::Bar => dx <= h && dy <= thin,
            SpriteKind::Cross => (dx <= thin && dy <= h) || (dx <= h && dy <= thin),
        }
    }
}

/// Discrete affine camera map: a background point at `q` in frame `tau`
/// sits at `M q + c` in frame `tau + 1`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraMotion {
    pub matrix: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl Default for CameraMotion {
    fn default() -> Self {
        CameraMotion { matrix: [[1.0, 0.0], [0.0, 1.0]], translation: [0.0, 0.0] }
    }
}

impl CameraMotion {
    pub fn is_identity(&self) -> bool {
        self.matrix == [[1.0, 0.0], [0.0, 1.0]] && self.translation == [0.0, 0.0]
    }

    pub fn step(&self, q: [f64; 2]) -> [f64; 2] {
        [
            self.matrix[0][0] * q[0] + self.matrix[0][1] * q[1] + self.translation[0],
            self.matrix[1][0] * q[0] + self.matrix[1][1] * q[1] + self.translation[1],
        ]
    }

    /// Displacement of the point at `q`: (M - I) q + c. Affine in `q` and
    /// independent of the frame index.
    pub fn flow_at(&self, q: [f64; 2]) -> [f64; 2] {
        let s = self.step(q);
        [s[0] - q[0], s[1] - q[1]]
    }
}

/// Fully sampled scene: everything needed to re-render a clip or answer
/// track queries analytically.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Scene {
    pub sprites: Vec<SpriteSpec>,
    pub camera: CameraMotion,
    pub background: Vec<f64>,
}

/// Ranges the clip sampler draws from. Label-determining quantities
/// (direction bin, speed bin, shape kind, color bucket) are sampled as
/// discrete bins first, so labels are exact functions of the draw.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneConfig {
    pub sprite_count: usize,
    pub size_range: (f64, f64),
    /// Speed magnitude range for the slow bin (bin 0).
    pub slow_speed: (f64, f64),
    /// Speed magnitude range for the fast bin (bin 1).
    pub fast_speed: (f64, f64),
    /// Hard cap on sampled velocity magnitude.
    pub max_speed: f64,
    pub camera: CameraMotion,
    /// Per-channel amplitude of the per-clip background color jitter.
    pub background_jitter: f64,
    /// Force sprite 0's appearance class (stratified generation).
    pub forced_appearance: Option<u32>,
    /// Force sprite 0's motion class (stratified generation).
    pub forced_motion: Option<u32>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            sprite_count: 2,
            size_range: (10.0, 16.0),
            slow_speed: (0.75, 1.25),
            fast_speed: (2.25, 2.75),
            max_speed: 4.0,
            camera: CameraMotion::default(),
            background_jitter: 0.08,
            forced_appearance: None,
            forced_motion: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sprite_count == 0 {
            return Err(Error::Config("sprite count must be >= 1".into()));
        }
        for (lo, hi) in [self.size_range, self.slow_speed, self.fast_speed] {
            if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi < lo {
                return Err(Error::Config("invalid sampling range".into()));
            }
        }
        if self.slow_speed.1.max(self.fast_speed.1) > self.max_speed {
            return Err(Error::Config(format!(
                "speed ranges exceed max speed {}",
                self.max_speed
            )));
        }
        if let Some(a) = self.forced_appearance {
            if a as usize >= APPEARANCE_CLASSES {
                return Err(Error::Config(format!("appearance class {a} out of range")));
            }
        }
        if let Some(m) = self.forced_motion {
            if m as usize >= MOTION_CLASSES {
                return Err(Error::Config(format!("motion class {m} out of range")));
            }
        }
        Ok(())
    }
}

/// A rendered clip with its ground truth.
///
/// `flow[[tau, y, x, d]]` is the frame-`tau` to frame-`tau+1` displacement
/// (d = 0 for x, 1 for y) of whatever covers the pixel: the frontmost
/// sprite, or the camera-driven background. The scene is kept when the
/// clip was produced by the sampler; clips decoded from shard files carry
/// `None` and answer track queries by flow integration instead.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub pixels: Array4<f32>,
    pub flow: Array4<f32>,
    pub appearance_label: u32,
    pub motion_label: u32,
    pub scene: Option<Scene>,
}

impl VideoClip {
    pub fn shape(&self) -> ClipShape {
        let d = self.pixels.shape();
        ClipShape { frames: d[0], height: d[1], width: d[2], channels: d[3] }
    }
}

fn bucket_color(bucket: usize, channels: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let jitter = 0.06;
    let base: Vec<f64> = if channels == 1 {
        vec![[0.45, 0.65, 0.85, 1.0][bucket % COLOR_BUCKETS]]
    } else {
        match bucket % COLOR_BUCKETS {
            0 => vec![0.95, 0.25, 0.25],
            1 => vec![0.25, 0.92, 0.30],
            2 => vec![0.25, 0.40, 0.95],
            _ => vec![0.95, 0.90, 0.25],
        }
    };
    base.into_iter()
        .map(|b| (b + rng.gen_range(-jitter..=jitter)).clamp(0.0, 1.0))
        .collect()
}

fn sample_sprite(
    rng: &mut ChaCha8Rng,
    shape: &ClipShape,
    cfg: &SceneConfig,
    forced_appearance: Option<u32>,
    forced_motion: Option<u32>,
) -> (SpriteSpec, u32, u32) {
    let (shape_idx, color_bucket) = match forced_appearance {
        Some(a) => ((a as usize) / COLOR_BUCKETS, (a as usize) % COLOR_BUCKETS),
        None => (rng.gen_range(0..SHAPE_KINDS), rng.gen_range(0..COLOR_BUCKETS)),
    };
    let (dir_bin, speed_bin) = match forced_motion {
        Some(m) => ((m as usize) / SPEED_BINS, (m as usize) % SPEED_BINS),
        None => (rng.gen_range(0..DIRECTION_BINS), rng.gen_range(0..SPEED_BINS)),
    };
    let size = rng.gen_range(cfg.size_range.0..=cfg.size_range.1);
    let color = bucket_color(color_bucket, shape.channels, rng);

    let sector = std::f64::consts::TAU / DIRECTION_BINS as f64;
    // Keep a small guard band inside the bin so rounding never flips the label.
    let angle = dir_bin as f64 * sector + rng.gen_range(-0.4 * sector..=0.4 * sector);
    let range = if speed_bin == 0 { cfg.slow_speed } else { cfg.fast_speed };
    let speed = rng.gen_range(range.0..=range.1);
    let velocity = [speed * angle.cos(), speed * angle.sin()];

    let margin_x = (size / 2.0).min((shape.width as f64 - 1.0) / 2.0);
    let margin_y = (size / 2.0).min((shape.height as f64 - 1.0) / 2.0);
    let pos0 = [
        rng.gen_range(margin_x..=(shape.width as f64 - 1.0 - margin_x)),
        rng.gen_range(margin_y..=(shape.height as f64 - 1.0 - margin_y)),
    ];

    let spec = SpriteSpec {
        kind: SpriteKind::from_index(shape_idx),
        size,
        color,
        pos0,
        velocity,
        motion: MotionModel::Constant,
    };
    let appearance = (shape_idx * COLOR_BUCKETS + color_bucket) as u32;
    let motion = (dir_bin * SPEED_BINS + speed_bin) as u32;
    (spec, appearance, motion)
}

/// Samples a scene from the seed. Labels come from sprite 0.
pub fn sample_scene(seed: u64, shape: &ClipShape, cfg: &SceneConfig) -> Result<(Scene, u32, u32)> {
    shape.validate()?;
    cfg.validate()?;
    let mut rng = crate::rng::stream(seed, "synth.scene", 0);
    let background: Vec<f64> = (0..shape.channels)
        .map(|_| {
            (0.16 + rng.gen_range(-cfg.background_jitter..=cfg.background_jitter)).clamp(0.0, 1.0)
        })
        .collect();
    let mut sprites = Vec::with_capacity(cfg.sprite_count);
    let mut labels = (0, 0);
    for i in 0..cfg.sprite_count {
        let (forced_a, forced_m) = if i == 0 {
            (cfg.forced_appearance, cfg.forced_motion)
        } else {
            (None, None)
        };
        let (spec, a, m) = sample_sprite(&mut rng, shape, cfg, forced_a, forced_m);
        if i == 0 {
            labels = (a, m);
        }
        sprites.push(spec);
    }
    Ok((Scene { sprites, camera: cfg.camera, background }, labels.0, labels.1))
}

/// Renders a scene into pixels and ground-truth flow.
///
/// Sprites are drawn in index order, so the highest index is frontmost;
/// the flow field at a pixel belongs to whatever was drawn there last.
pub fn render(scene: &Scene, shape: &ClipShape) -> (Array4<f32>, Array4<f32>) {
    let (t, h, w, c) = (shape.frames, shape.height, shape.width, shape.channels);
    let mut pixels = Array4::<f32>::zeros((t, h, w, c));
    let mut flow = Array4::<f32>::zeros((t, h, w, 2));

    let bg: Vec<f32> = scene.background.iter().map(|&v| v as f32).collect();
    let identity_cam = scene.camera.is_identity();

    for tau in 0..t {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    pixels[[tau, y, x, ch]] = bg[ch];
                }
            }
        }
        if !identity_cam {
            for y in 0..h {
                for x in 0..w {
                    let f = scene.camera.flow_at([x as f64, y as f64]);
                    flow[[tau, y, x, 0]] = f[0] as f32;
                    flow[[tau, y, x, 1]] = f[1] as f32;
                }
            }
        }
        for sprite in &scene.sprites {
            let tau_f = tau as f64;
            let [cx, cy] = sprite.pos(tau_f);
            let half = sprite.size / 2.0;
            let x_lo = ((cx - half).floor().max(0.0)) as usize;
            let x_hi = ((cx + half).ceil().min(w as f64 - 1.0)) as usize;
            let y_lo = ((cy - half).floor().max(0.0)) as usize;
            let y_hi = ((cy + half).ceil().min(h as f64 - 1.0)) as usize;
            if (cx + half) < 0.0 || (cy + half) < 0.0 || (cx - half) > w as f64 - 1.0
                || (cy - half) > h as f64 - 1.0
            {
                continue;
            }
            let f = sprite.flow(tau_f);
            let (fx, fy) = (f[0] as f32, f[1] as f32);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    if sprite.covers(tau_f, x as f64, y as f64) {
                        for ch in 0..c {
                            pixels[[tau, y, x, ch]] = sprite.color[ch] as f32;
                        }
                        flow[[tau, y, x, 0]] = fx;
                        flow[[tau, y, x, 1]] = fy;
                    }
                }
            }
        }
    }
    (pixels, flow)
}

/// Generates one clip. Identical `(seed, shape, cfg)` always yields a
/// byte-identical clip.
pub fn generate_clip(seed: u64, shape: &ClipShape, cfg: &SceneConfig) -> Result<VideoClip> {
    let (scene, appearance, motion) = sample_scene(seed, shape, cfg)?;
    let (pixels, flow) = render(&scene, shape);
    Ok(VideoClip { pixels, flow, appearance_label: appearance, motion_label: motion, scene: Some(scene) })
}

/// Forced `(appearance, motion)` classes for clip `index` in a stratified
/// set: cycling both axes guarantees every class appears once per
/// `APPEARANCE_CLASSES * MOTION_CLASSES` consecutive clips.
pub fn stratified_labels(index: u64) -> (u32, u32) {
    let a = (index % APPEARANCE_CLASSES as u64) as u32;
    let m = ((index / APPEARANCE_CLASSES as u64) % MOTION_CLASSES as u64) as u32;
    (a, m)
}

/// Generates clip `index` of a stratified set: label classes are forced
/// by [`stratified_labels`], everything else is sampled from the clip's
/// own seed stream.
pub fn generate_stratified_clip(
    master_seed: u64,
    index: u64,
    shape: &ClipShape,
    cfg: &SceneConfig,
) -> Result<VideoClip> {
    let (a, m) = stratified_labels(index);
    let mut cfg = cfg.clone();
    cfg.forced_appearance = Some(a);
    cfg.forced_motion = Some(m);
    let clip_seed = crate::rng::stream(master_seed, "synth.set", index).gen::<u64>();
    generate_clip(clip_seed, shape, &cfg)
}

/// Exact point tracks for a clip.
///
/// Queries are positions in frame 0, listed in row-major grid order with
/// `grid_rows * grid_cols` entries. Every `stride`-th frame is tracked
/// (frame 0 included), giving `ceil(T / stride)` tracked frames. A query
/// covered by a sprite at frame 0 follows that sprite's analytic path
/// (frontmost sprite wins); background queries follow the camera map.
/// Positions are clamped to frame bounds.
///
/// Clips without a scene description (e.g. decoded from a shard) fall
/// back to stepping through the stored flow field at nearest-pixel
/// resolution, which is exact for the piecewise-constant fields the
/// renderer emits as long as the query stays on the same object.
pub fn oracle_track(
    clip: &VideoClip,
    queries: &[[f64; 2]],
    grid_rows: usize,
    grid_cols: usize,
    stride: usize,
) -> Result<TrackSet> {
    let shape = clip.shape();
    if stride == 0 {
        return Err(Error::Input("stride must be positive".into()));
    }
    if queries.len() != grid_rows * grid_cols {
        return Err(Error::Input(format!(
            "query count {} does not match grid {}x{}",
            queries.len(),
            grid_rows,
            grid_cols
        )));
    }
    let (wmax, hmax) = (shape.width as f64 - 1.0, shape.height as f64 - 1.0);
    for q in queries {
        if !(q[0] >= 0.0 && q[0] <= wmax && q[1] >= 0.0 && q[1] <= hmax) {
            return Err(Error::Input(format!("query ({}, {}) outside frame bounds", q[0], q[1])));
        }
    }
    let tracked = shape.frames.div_ceil(stride);
    let mut positions = Array3::<f64>::zeros((tracked, queries.len(), 2));

    match &clip.scene {
        Some(scene) => {
            for (qi, q) in queries.iter().enumerate() {
                // Frontmost sprite covering the query at frame 0, if any.
                let sprite = scene.sprites.iter().rev().find(|s| s.covers(0.0, q[0], q[1]));
                match sprite {
                    Some(s) => {
                        let p0 = s.pos(0.0);
                        let offset = [q[0] - p0[0], q[1] - p0[1]];
                        for (ki, tau) in (0..shape.frames).step_by(stride).enumerate() {
                            let p = s.pos(tau as f64);
                            positions[[ki, qi, 0]] = (p[0] + offset[0]).clamp(0.0, wmax);
                            positions[[ki, qi, 1]] = (p[1] + offset[1]).clamp(0.0, hmax);
                        }
                    }
                    None => {
                        let mut p = *q;
                        let mut next_frame = 0usize;
                        for (ki, tau) in (0..shape.frames).step_by(stride).enumerate() {
                            while next_frame < tau {
                                p = scene.camera.step(p);
                                next_frame += 1;
                            }
                            positions[[ki, qi, 0]] = p[0].clamp(0.0, wmax);
                            positions[[ki, qi, 1]] = p[1].clamp(0.0, hmax);
                        }
                    }
                }
            }
        }
        None => {
            // Flow-integration fallback: advance by the stored flow at the
            // nearest pixel, one frame at a time.
            for (qi, q) in queries.iter().enumerate() {
                let mut p = *q;
                let mut next_frame = 0usize;
                for (ki, tau) in (0..shape.frames).step_by(stride).enumerate() {
                    while next_frame < tau {
                        let px = (p[0].round().clamp(0.0, wmax)) as usize;
                        let py = (p[1].round().clamp(0.0, hmax)) as usize;
                        p[0] += clip.flow[[next_frame, py, px, 0]] as f64;
                        p[1] += clip.flow[[next_frame, py, px, 1]] as f64;
                        next_frame += 1;
                    }
                    positions[[ki, qi, 0]] = p[0].clamp(0.0, wmax);
                    positions[[ki, qi, 1]] = p[1].clamp(0.0, hmax);
                }
            }
        }
    }

    let positions = positions
        .into_shape_with_order((tracked, grid_rows, grid_cols, 2))
        .expect("grid dims validated above");
    Ok(TrackSet { positions, provenance: Provenance::Oracle })
}
