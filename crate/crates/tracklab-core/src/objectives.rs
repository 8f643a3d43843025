//! Reconstruction targets and masked losses.
//!
//! Spatial supervision is either standardized tubelet pixels or features
//! from a frozen synthetic teacher; motion supervision is patch-unit
//! displacement vectors taken from tracks. All losses average per token
//! first and then over masked tokens only, in 64-bit arithmetic, so the
//! weighting between heads is independent of target dimensionality.

use crate::error::{Error, Result};
use crate::linalg::{self, Real};
use crate::masking::MaskMap;
use crate::rng;
use crate::tokenizer::TokenGrid;
use crate::tracks::MotionTargets;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const STANDARDIZE_EPS: f64 = 1e-6;

/// Per-tubelet standardization: each row is shifted to mean zero and
/// scaled to unit variance (population statistics, epsilon-guarded).
/// A constant row maps to exact zeros.
pub fn pixel_targets<F: Real>(raw: &ArrayView2<F>) -> Array2<F> {
    let mut out = Array2::<F>::zeros(raw.dim());
    pixel_targets_into(raw, out.as_slice_mut().expect("fresh array"));
    out
}

/// As `pixel_targets`, writing into a caller-owned row-major buffer of
/// the same element count.
pub fn pixel_targets_into<F: Real>(raw: &ArrayView2<F>, os: &mut [F]) {
    let (rows, d) = raw.dim();
    assert_eq!(os.len(), rows * d, "output buffer must match the raw shape");
    let mut scratch = None;
    let xs = linalg::flat(raw, &mut scratch);
    let inv_d = 1.0 / d as f64;
    let main = d - d % linalg::LANES;
    for r in 0..rows {
        let xr = &xs[r * d..(r + 1) * d];
        let mean_f = F::from_f64(linalg::lane_sum(xr).to_f64() * inv_d);
        let mut acc = [F::zero(); linalg::LANES];
        for c in xr[..main].chunks_exact(linalg::LANES) {
            for i in 0..linalg::LANES {
                let dv = c[i] - mean_f;
                acc[i] = acc[i] + dv * dv;
            }
        }
        let mut var = linalg::lane_total(acc).to_f64();
        for &v in &xr[main..] {
            let dv = (v - mean_f).to_f64();
            var += dv * dv;
        }
        var *= inv_d;
        let inv_std = F::from_f64(1.0 / (var + STANDARDIZE_EPS).sqrt());
        let or = &mut os[r * d..(r + 1) * d];
        for (o, &v) in or.iter_mut().zip(xr.iter()) {
            *o = (v - mean_f) * inv_std;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    FrozenProjection,
    GradHistogram,
}

impl TeacherKind {
    pub fn name(&self) -> &'static str {
        match self {
            TeacherKind::FrozenProjection => "frozen_projection",
            TeacherKind::GradHistogram => "grad_histogram",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frozen_projection" => Ok(TeacherKind::FrozenProjection),
            "grad_histogram" => Ok(TeacherKind::GradHistogram),
            other => Err(Error::Config(format!("unknown teacher '{other}'"))),
        }
    }
}

const HIST_BINS: usize = 8;
const HIST_CELLS: usize = 2;

/// A frozen feature extractor. Parameters are fixed at construction and
/// never updated; [`Teacher::state_hash`] lets callers verify that.
#[derive(Debug, Clone)]
pub enum Teacher {
    /// Fixed random linear map of standardized tubelet pixels, rows
    /// unit-normalized. No bias: standardized inputs are already
    /// centered, and a frozen offset would only shift every target.
    FrozenProjection { weight: Array2<f64> },
    /// Orientation histogram of spatial image gradients: 8 signed bins
    /// over 2x2 cells, one block per non-overlapping frame pair,
    /// L2-normalized per cell.
    GradHistogram { depth: usize, patch: usize, channels: usize },
}

impl Teacher {
    pub fn frozen_projection(seed: u64, raw_len: usize, dim: usize) -> Teacher {
        let mut rng = rng::stream(seed, "teacher.frozen_projection", 0);
        let mut weight = Array2::<f64>::zeros((dim, raw_len));
        for mut row in weight.rows_mut() {
            let mut norm_sq = 0.0;
            for v in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = z;
                norm_sq += z * z;
            }
            let inv = 1.0 / norm_sq.sqrt();
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        Teacher::FrozenProjection { weight }
    }

    pub fn grad_histogram(depth: usize, patch: usize, channels: usize) -> Result<Teacher> {
        if depth == 0 || depth % 2 != 0 {
            return Err(Error::Config(format!(
                "gradient-histogram teacher needs an even tubelet depth, got {depth}"
            )));
        }
        if patch % HIST_CELLS != 0 {
            return Err(Error::Config(format!(
                "gradient-histogram teacher needs patch divisible by {HIST_CELLS}, got {patch}"
            )));
        }
        if channels == 0 {
            return Err(Error::Config("channel count must be positive".into()));
        }
        Ok(Teacher::GradHistogram { depth, patch, channels })
    }

    pub fn from_kind(
        kind: TeacherKind,
        seed: u64,
        raw_len: usize,
        feature_dim: usize,
        depth: usize,
        patch: usize,
        channels: usize,
    ) -> Result<Teacher> {
        match kind {
            TeacherKind::FrozenProjection => {
                if feature_dim == 0 {
                    return Err(Error::Config("teacher feature dim must be positive".into()));
                }
                Ok(Teacher::frozen_projection(seed, raw_len, feature_dim))
            }
            TeacherKind::GradHistogram => Teacher::grad_histogram(depth, patch, channels),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Teacher::FrozenProjection { weight } => weight.nrows(),
            Teacher::GradHistogram { depth, .. } => {
                (depth / 2) * HIST_CELLS * HIST_CELLS * HIST_BINS
            }
        }
    }

    /// FNV-1a over the frozen state; stable across calls by contract.
    pub fn state_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        match self {
            Teacher::FrozenProjection { weight } => {
                eat(b"frozen_projection");
                for &v in weight.iter() {
                    eat(&v.to_bits().to_le_bytes());
                }
            }
            Teacher::GradHistogram { depth, patch, channels } => {
                eat(b"grad_histogram");
                for v in [*depth as u64, *patch as u64, *channels as u64] {
                    eat(&v.to_le_bytes());
                }
            }
        }
        h
    }

    /// Feature targets for one clip's tubelet matrix (N, raw_len).
    pub fn features<F: Real>(&self, raw: &ArrayView2<F>) -> Result<Array2<F>> {
        match self {
            Teacher::FrozenProjection { weight } => {
                let standardized = pixel_targets(raw);
                if raw.ncols() != weight.ncols() {
                    return Err(Error::Input(format!(
                        "tubelet length {} does not match teacher input {}",
                        raw.ncols(),
                        weight.ncols()
                    )));
                }
                let w = weight.mapv(F::from_f64);
                let mut out = Array2::<F>::zeros((raw.nrows(), weight.nrows()));
                linalg::gemm(
                    F::one(),
                    &standardized.view(),
                    false,
                    &w.view(),
                    true,
                    F::zero(),
                    &mut out.view_mut(),
                );
                Ok(out)
            }
            Teacher::GradHistogram { depth, patch, channels } => {
                self.histogram_features(raw, *depth, *patch, *channels)
            }
        }
    }

    fn histogram_features<F: Real>(
        &self,
        raw: &ArrayView2<F>,
        depth: usize,
        patch: usize,
        channels: usize,
    ) -> Result<Array2<F>> {
        let expect = depth * patch * patch * channels;
        if raw.ncols() != expect {
            return Err(Error::Input(format!(
                "tubelet length {} does not match {depth}x{patch}x{patch}x{channels}",
                raw.ncols()
            )));
        }
        let dim = self.dim();
        let cell = patch / HIST_CELLS;
        let mut out = Array2::<F>::zeros((raw.nrows(), dim));
        let at = |f: usize, r: usize, c: usize, ch: usize| ((f * patch + r) * patch + c) * channels + ch;
        let mut hist = vec![0.0f64; dim];
        for (token, row) in raw.rows().into_iter().enumerate() {
            hist.iter_mut().for_each(|v| *v = 0.0);
            let px = |f: usize, r: usize, c: usize, ch: usize| row[at(f, r, c, ch)].to_f64();
            for f in 0..depth {
                let pair = f / 2;
                for r in 0..patch {
                    for c in 0..patch {
                        for ch in 0..channels {
                            // Central differences inside, one-sided at edges.
                            let gx = match c {
                                0 => px(f, r, 1, ch) - px(f, r, 0, ch),
                                c if c == patch - 1 => px(f, r, c, ch) - px(f, r, c - 1, ch),
                                c => (px(f, r, c + 1, ch) - px(f, r, c - 1, ch)) / 2.0,
                            };
                            let gy = match r {
                                0 => px(f, 1, c, ch) - px(f, 0, c, ch),
                                r if r == patch - 1 => px(f, r, c, ch) - px(f, r - 1, c, ch),
                                r => (px(f, r + 1, c, ch) - px(f, r - 1, c, ch)) / 2.0,
                            };
                            let mag = (gx * gx + gy * gy).sqrt();
                            if mag == 0.0 {
                                continue;
                            }
                            let theta = gy.atan2(gx);
                            let mut bin = ((theta + std::f64::consts::PI)
                                / (2.0 * std::f64::consts::PI / HIST_BINS as f64))
                                .floor() as usize;
                            bin %= HIST_BINS;
                            let cr = (r / cell).min(HIST_CELLS - 1);
                            let cc = (c / cell).min(HIST_CELLS - 1);
                            let idx = ((pair * HIST_CELLS + cr) * HIST_CELLS + cc) * HIST_BINS + bin;
                            hist[idx] += mag;
                        }
                    }
                }
            }
            // Per-cell L2 normalization; an all-zero cell stays zero.
            for block in hist.chunks_mut(HIST_BINS) {
                let norm_sq: f64 = block.iter().map(|v| v * v).sum();
                if norm_sq > 1e-12 {
                    let inv = 1.0 / norm_sq.sqrt();
                    block.iter_mut().for_each(|v| *v *= inv);
                }
            }
            let mut out_row = out.row_mut(token);
            for (o, &v) in out_row.iter_mut().zip(hist.iter()) {
                *o = F::from_f64(v);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    Pixel,
    FrozenProjection,
    GradHistogram,
}

impl SpatialMode {
    pub fn name(&self) -> &'static str {
        match self {
            SpatialMode::Pixel => "pixel",
            SpatialMode::FrozenProjection => "frozen_projection",
            SpatialMode::GradHistogram => "grad_histogram",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(SpatialMode::Pixel),
            "frozen_projection" => Ok(SpatialMode::FrozenProjection),
            "grad_histogram" => Ok(SpatialMode::GradHistogram),
            other => Err(Error::Config(format!("unknown spatial target mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the motion loss in L = L_spatial + lambda * L_motion.
    pub lambda: f64,
    pub spatial: SpatialMode,
    /// Output width of the frozen-projection teacher.
    pub feature_dim: usize,
    pub motion_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            spatial: SpatialMode::Pixel,
            feature_dim: 32,
            motion_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        if self.spatial == SpatialMode::FrozenProjection && self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }

    /// Whether the motion branch participates at all: a zero weight and
    /// a disabled flag are both the exact baseline path.
    pub fn motion_active(&self) -> bool {
        self.motion_enabled && self.lambda > 0.0
    }
}

/// Spatial target construction for one clip, dispatched on mode.
#[derive(Debug, Clone)]
pub enum SpatialTargeter {
    Pixel,
    Teacher(Teacher),
}

impl SpatialTargeter {
    pub fn from_config(
        cfg: &LossConfig,
        seed: u64,
        raw_len: usize,
        tubelet_depth: usize,
        patch: usize,
        channels: usize,
    ) -> Result<SpatialTargeter> {
        match cfg.spatial {
            SpatialMode::Pixel => Ok(SpatialTargeter::Pixel),
            SpatialMode::FrozenProjection => Ok(SpatialTargeter::Teacher(Teacher::from_kind(
                TeacherKind::FrozenProjection,
                seed,
                raw_len,
                cfg.feature_dim,
                tubelet_depth,
                patch,
                channels,
            )?)),
            SpatialMode::GradHistogram => Ok(SpatialTargeter::Teacher(Teacher::from_kind(
                TeacherKind::GradHistogram,
                seed,
                raw_len,
                cfg.feature_dim,
                tubelet_depth,
                patch,
                channels,
            )?)),
        }
    }

    pub fn dim(&self, raw_len: usize) -> usize {
        match self {
            SpatialTargeter::Pixel => raw_len,
            SpatialTargeter::Teacher(t) => t.dim(),
        }
    }

    pub fn targets<F: Real>(&self, raw: &ArrayView2<F>) -> Result<Array2<F>> {
        match self {
            SpatialTargeter::Pixel => Ok(pixel_targets(raw)),
            SpatialTargeter::Teacher(t) => t.features(raw),
        }
    }

    /// Writes one clip's target rows into a row-major buffer sized
    /// `raw.nrows() * self.dim(raw.ncols())`.
    pub fn targets_into<F: Real>(&self, raw: &ArrayView2<F>, out: &mut [F]) -> Result<()> {
        match self {
            SpatialTargeter::Pixel => {
                pixel_targets_into(raw, out);
                Ok(())
            }
            SpatialTargeter::Teacher(t) => {
                let f = t.features(raw)?;
                out.copy_from_slice(f.as_slice().expect("teacher output is standard layout"));
                Ok(())
            }
        }
    }
}

fn check_loss_shapes<F: Real>(
    pred: &Array2<F>,
    target: &Array2<F>,
    masks: &[MaskMap],
) -> Result<(usize, usize)> {
    if masks.is_empty() {
        return Err(Error::Input("at least one mask map is required".into()));
    }
    let n = masks[0].grid.tokens();
    if masks.iter().any(|m| m.grid.tokens() != n) {
        return Err(Error::Input("mask maps disagree on token count".into()));
    }
    if pred.dim() != target.dim() {
        return Err(Error::Input(format!(
            "predictions {:?} and targets {:?} disagree",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.nrows() != masks.len() * n {
        return Err(Error::Input(format!(
            "{} prediction rows for {} clips of {n} tokens",
            pred.nrows(),
            masks.len()
        )));
    }
    let masked_total: usize = masks.iter().map(|m| m.masked_count()).sum();
    if masked_total == 0 {
        return Err(Error::Config("empty masked set: nothing to supervise".into()));
    }
    Ok((n, masked_total))
}

/// Mean over masked tokens of the per-token mean squared error. Visible
/// slots are never read, so perturbing them cannot change the result.
pub fn masked_loss<F: Real>(
    pred: &Array2<F>,
    target: &Array2<F>,
    masks: &[MaskMap],
) -> Result<f64> {
    let (n, masked_total) = check_loss_shapes(pred, target, masks)?;
    let d = pred.ncols();
    let ps = pred.as_slice().expect("predictions are standard layout");
    let ts = target.as_slice().expect("targets are standard layout");
    let mut acc = 0.0f64;
    for (b, mask) in masks.iter().enumerate() {
        for &tok in &mask.masked_tokens {
            let row = b * n + tok;
            let pr = &ps[row * d..(row + 1) * d];
            let tr = &ts[row * d..(row + 1) * d];
            acc += linalg::lane_sq_diff(pr, tr).to_f64() / d as f64;
        }
    }
    Ok(acc / masked_total as f64)
}

/// Loss plus its gradient with respect to predictions: exactly zero at
/// every visible slot, 2 (p - t) / (masked * d) at masked slots.
pub fn masked_loss_grad<F: Real>(
    pred: &Array2<F>,
    target: &Array2<F>,
    masks: &[MaskMap],
) -> Result<(f64, Array2<F>)> {
    let (n, masked_total) = check_loss_shapes(pred, target, masks)?;
    let d = pred.ncols();
    let scale = F::from_f64(2.0 / (masked_total as f64 * d as f64));
    let mut acc = 0.0f64;
    let mut grad = Array2::<F>::zeros(pred.dim());
    let ps = pred.as_slice().expect("predictions are standard layout");
    let ts = target.as_slice().expect("targets are standard layout");
    let gs = grad.as_slice_mut().expect("fresh array");
    for (b, mask) in masks.iter().enumerate() {
        for &tok in &mask.masked_tokens {
            let row = b * n + tok;
            let pr = &ps[row * d..(row + 1) * d];
            let tr = &ts[row * d..(row + 1) * d];
            acc += linalg::lane_sq_diff(pr, tr).to_f64() / d as f64;
            let gr = &mut gs[row * d..(row + 1) * d];
            for ((g, &p), &t) in gr.iter_mut().zip(pr.iter()).zip(tr.iter()) {
                *g = (p - t) * scale;
            }
        }
    }
    Ok((acc / masked_total as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub spatial: f64,
    pub motion: f64,
    pub lambda: f64,
    pub total: f64,
    pub masked_tokens: usize,
}

/// L = L_spatial + lambda * L_motion, recorded with its components.
pub fn combine(spatial: f64, motion: f64, lambda: f64, masked_tokens: usize) -> LossReport {
    LossReport { spatial, motion, lambda, total: spatial + lambda * motion, masked_tokens }
}

/// Arranges dense displacement targets by token: each token slot gets
/// the 2-vectors of its patch's sub-cells, flattened row-major. The
/// sub-grid factor is derived from the shapes, so targets produced by
/// explicit upsampling and by tracking a denser grid are treated
/// identically.
pub fn motion_target_rows<F: Real>(
    targets: &MotionTargets,
    grid: &TokenGrid,
) -> Result<Array2<F>> {
    let (slots, rows, cols, two) = targets.displacements.dim();
    debug_assert_eq!(two, 2);
    if slots != grid.slots {
        return Err(Error::Input(format!(
            "targets cover {slots} temporal slots, token grid has {}",
            grid.slots
        )));
    }
    if rows % grid.rows != 0 || cols % grid.cols != 0 {
        return Err(Error::Input(format!(
            "target lattice {rows}x{cols} does not tile the {}x{} token grid",
            grid.rows, grid.cols
        )));
    }
    let ur = rows / grid.rows;
    let uc = cols / grid.cols;
    if ur != uc {
        return Err(Error::Input(format!(
            "anisotropic target lattice: {ur}x vs {uc}x per patch"
        )));
    }
    let u = ur;
    let mut out = Array2::<F>::zeros((grid.tokens(), 2 * u * u));
    for token in 0..grid.tokens() {
        let (k, r, c) = grid.unflatten(token);
        let mut row = out.row_mut(token);
        for i in 0..u {
            for j in 0..u {
                let sub = i * u + j;
                row[2 * sub] = F::from_f64(targets.displacements[[k, r * u + i, c * u + j, 0]]);
                row[2 * sub + 1] = F::from_f64(targets.displacements[[k, r * u + i, c * u + j, 1]]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{MaskStrategy, MaskingConfig, sample_mask};
    use crate::tracks::{Provenance, TrackSet, TrackerGridConfig, DisplacementMode};
    use ndarray::{Array4, array};

    fn grid_2x2x2() -> TokenGrid {
        TokenGrid { slots: 2, rows: 2, cols: 2 }
    }

    fn half_mask(seed: u64) -> MaskMap {
        let cfg = MaskingConfig {
            mask_ratio: 0.5,
            strategy: MaskStrategy::RandomTube,
            ..MaskingConfig::default()
        };
        sample_mask(&cfg, &grid_2x2x2(), None, seed).unwrap()
    }

    #[test]
    fn constant_tubelet_standardizes_to_zero() {
        let raw = Array2::<f64>::from_elem((3, 16), 0.75);
        let t = pixel_targets(&raw.view());
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binary_tubelet_standardizes_to_plus_minus_one() {
        let mut raw = Array2::<f64>::zeros((1, 8));
        for j in 4..8 {
            raw[[0, j]] = 1.0;
        }
        let t = pixel_targets(&raw.view());
        for j in 0..8 {
            let want = if j < 4 { -1.0 } else { 1.0 };
            assert!((t[[0, j]] - want).abs() < 3e-6, "{} vs {want}", t[[0, j]]);
        }
    }

    #[test]
    fn standardized_rows_have_unit_stats() {
        let mut rng_s = crate::rng::stream(3, "objectives-test", 0);
        let raw = Array2::<f64>::from_shape_fn((5, 64), |_| rng_s.gen_range(-4.0..9.0));
        let t = pixel_targets(&raw.view());
        for r in 0..5 {
            let mean: f64 = t.row(r).sum() / 64.0;
            let var: f64 = t.row(r).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row {r} var {var}");
        }
    }

    #[test]
    fn frozen_projection_is_reproducible_with_unit_rows() {
        let a = Teacher::frozen_projection(5, 32, 8);
        let b = Teacher::frozen_projection(5, 32, 8);
        let c = Teacher::frozen_projection(6, 32, 8);
        assert_eq!(a.state_hash(), b.state_hash());
        assert_ne!(a.state_hash(), c.state_hash());
        let Teacher::FrozenProjection { weight } = &a else { unreachable!() };
        for row in weight.rows() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_state_survives_feature_extraction() {
        let t = Teacher::frozen_projection(9, 64, 16);
        let before = t.state_hash();
        let raw = Array2::<f64>::from_shape_fn((4, 64), |(i, j)| ((i * 64 + j) as f64).sin());
        for _ in 0..10 {
            t.features(&raw.view()).unwrap();
        }
        assert_eq!(t.state_hash(), before);
    }

    #[test]
    fn constant_tubelet_has_zero_histogram() {
        let t = Teacher::grad_histogram(2, 8, 1).unwrap();
        let raw = Array2::<f64>::from_elem((2, 128), 0.3);
        let f = t.features(&raw.view()).unwrap();
        assert_eq!(t.dim(), 32);
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_edge_mass_lands_in_the_horizontal_bin_pair() {
        // Left half dark, right half bright, both frames: all gradients
        // point in +x, so only the theta=0 bin (and by symmetry its pi
        // partner) may carry mass.
        let t = Teacher::grad_histogram(2, 8, 1).unwrap();
        let mut raw = Array2::<f64>::zeros((1, 128));
        for f in 0..2 {
            for r in 0..8 {
                for c in 4..8 {
                    raw[[0, (f * 8 + r) * 8 + c]] = 1.0;
                }
            }
        }
        let feats = t.features(&raw.view()).unwrap();
        let mut pair_mass = 0.0;
        let mut other_mass = 0.0;
        for cell in 0..4 {
            for bin in 0..HIST_BINS {
                let v = feats[[0, cell * HIST_BINS + bin]];
                // theta=0 falls in bin 4, theta=pi in bin 0.
                if bin == 4 || bin == 0 {
                    pair_mass += v;
                } else {
                    other_mass += v;
                }
            }
        }
        assert!(pair_mass > 0.5, "no mass in the horizontal pair");
        assert!(other_mass < 1e-12, "mass leaked into other bins: {other_mass}");
    }

    #[test]
    fn histogram_cells_are_unit_normalized() {
        let t = Teacher::grad_histogram(2, 8, 1).unwrap();
        let mut rng_s = crate::rng::stream(11, "objectives-test", 1);
        let raw = Array2::<f64>::from_shape_fn((3, 128), |_| rng_s.gen_range(0.0..1.0));
        let f = t.features(&raw.view()).unwrap();
        for token in 0..3 {
            for cell in 0..4 {
                let norm_sq: f64 = (0..HIST_BINS)
                    .map(|b| f[[token, cell * HIST_BINS + b]].powi(2))
                    .sum();
                assert!((norm_sq - 1.0).abs() < 1e-9, "cell {cell} norm^2 {norm_sq}");
            }
        }
    }

    #[test]
    fn exact_predictions_lose_nothing() {
        let mask = half_mask(1);
        let pred = Array2::<f64>::from_shape_fn((8, 4), |(i, j)| (i * 4 + j) as f64);
        let loss = masked_loss(&pred, &pred.clone(), std::slice::from_ref(&mask)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn visible_slots_contribute_exactly_zero() {
        let mask = half_mask(2);
        let mut rng_s = crate::rng::stream(21, "objectives-test", 2);
        let pred = Array2::<f64>::from_shape_fn((8, 4), |_| rng_s.gen_range(-1.0..1.0));
        let target = Array2::<f64>::from_shape_fn((8, 4), |_| rng_s.gen_range(-1.0..1.0));
        let (loss, grad) = masked_loss_grad(&pred, &target, std::slice::from_ref(&mask)).unwrap();

        let mut perturbed = pred.clone();
        for &tok in &mask.visible_tokens {
            for j in 0..4 {
                perturbed[[tok, j]] += 1000.0;
            }
        }
        let loss2 = masked_loss(&perturbed, &target, std::slice::from_ref(&mask)).unwrap();
        assert_eq!(loss.to_bits(), loss2.to_bits(), "visible perturbation changed the loss");
        for &tok in &mask.visible_tokens {
            for j in 0..4 {
                assert_eq!(grad[[tok, j]], 0.0);
            }
        }
        // Masked-slot gradient matches the closed form.
        let masked_total = mask.masked_count();
        for &tok in &mask.masked_tokens {
            for j in 0..4 {
                let want = 2.0 * (pred[[tok, j]] - target[[tok, j]]) / (masked_total as f64 * 4.0);
                assert!((grad[[tok, j]] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_offending_token_gives_delta_sq_over_masked() {
        let mask = half_mask(3);
        let delta = 0.25f64;
        let target = Array2::<f64>::zeros((8, 6));
        let mut pred = target.clone();
        let victim = mask.masked_tokens[1];
        for j in 0..6 {
            pred[[victim, j]] = delta;
        }
        let loss = masked_loss(&pred, &target, std::slice::from_ref(&mask)).unwrap();
        let want = delta * delta / mask.masked_count() as f64;
        assert!((loss - want).abs() < 1e-15, "{loss} vs {want}");
    }

    #[test]
    fn empty_masked_set_is_a_config_error() {
        let grid = grid_2x2x2();
        let all = MaskMap::with_visible_cells(grid, vec![0, 1, 2, 3]).unwrap();
        let pred = Array2::<f64>::zeros((8, 4));
        match masked_loss(&pred, &pred.clone(), std::slice::from_ref(&all)) {
            Err(Error::Config(msg)) => assert!(msg.contains("masked"), "got: {msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn batch_loss_averages_over_all_masked_tokens() {
        let m1 = half_mask(4);
        let m2 = half_mask(5);
        let target = Array2::<f64>::zeros((16, 3));
        let mut pred = target.clone();
        // One off token in clip 2.
        let victim = 8 + m2.masked_tokens[0];
        for j in 0..3 {
            pred[[victim, j]] = 1.0;
        }
        let loss = masked_loss(&pred, &target, &[m1.clone(), m2.clone()]).unwrap();
        let want = 1.0 / (m1.masked_count() + m2.masked_count()) as f64;
        assert!((loss - want).abs() < 1e-15);
    }

    #[test]
    fn combine_matches_the_weighted_sum() {
        let r = combine(0.4, 0.2, 0.25, 10);
        assert_eq!(r.total, 0.45);
        let r1 = combine(1.25, 0.75, 1.0, 3);
        assert_eq!(r1.total, 2.0);
        let r0 = combine(0.7, 123.0, 0.0, 3);
        assert_eq!(r0.total, 0.7);
        let rel = ((r.total - (r.spatial + r.lambda * r.motion)) / r.total).abs();
        assert!(rel < 1e-12);
    }

    #[test]
    fn motion_rows_pass_through_at_factor_one() {
        let grid = grid_2x2x2();
        let mut disp = Array4::<f64>::zeros((2, 2, 2, 2));
        for k in 0..2 {
            for r in 0..2 {
                for c in 0..2 {
                    disp[[k, r, c, 0]] = (k * 4 + r * 2 + c) as f64;
                    disp[[k, r, c, 1]] = -((k * 4 + r * 2 + c) as f64);
                }
            }
        }
        let targets = MotionTargets {
            displacements: disp,
            upsample: 1,
            saliency: Array2::zeros((2, 2)),
        };
        let rows = motion_target_rows::<f64>(&targets, &grid).unwrap();
        assert_eq!(rows.dim(), (8, 2));
        for token in 0..8 {
            let (k, r, c) = grid.unflatten(token);
            let id = (k * 4 + r * 2 + c) as f64;
            assert_eq!(rows[[token, 0]], id);
            assert_eq!(rows[[token, 1]], -id);
        }
    }

    #[test]
    fn motion_rows_flatten_subcells_row_major() {
        let grid = TokenGrid { slots: 1, rows: 1, cols: 1 };
        let disp = array![[
            [[1.0, 10.0], [2.0, 20.0]],
            [[3.0, 30.0], [4.0, 40.0]],
        ]];
        let targets = MotionTargets {
            displacements: disp,
            upsample: 2,
            saliency: Array2::zeros((1, 1)),
        };
        let rows = motion_target_rows::<f64>(&targets, &grid).unwrap();
        assert_eq!(rows.dim(), (1, 8));
        assert_eq!(
            rows.row(0).to_vec(),
            vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]
        );
    }

    #[test]
    fn motion_rows_reject_mismatched_lattices() {
        let grid = grid_2x2x2();
        let targets = MotionTargets {
            displacements: Array4::zeros((2, 3, 2, 2)),
            upsample: 1,
            saliency: Array2::zeros((3, 2)),
        };
        assert!(matches!(motion_target_rows::<f64>(&targets, &grid), Err(Error::Input(_))));
    }

    #[test]
    fn true_constant_velocity_prediction_has_negligible_motion_loss() {
        // Tracks moving at a constant (3, -2) px per tracked step over a
        // 16 px patch; a decoder emitting exactly that displacement
        // everywhere is a perfect motion predictor.
        let grid = grid_2x2x2();
        let patch = 16usize;
        let (k, rows, cols) = (3usize, 2usize, 2usize);
        let mut positions = Array4::<f64>::zeros((k, rows, cols, 2));
        for kk in 0..k {
            for r in 0..rows {
                for c in 0..cols {
                    positions[[kk, r, c, 0]] = (c * patch + 8) as f64 + 3.0 * kk as f64;
                    positions[[kk, r, c, 1]] = (r * patch + 8) as f64 - 2.0 * kk as f64;
                }
            }
        }
        let tracks = TrackSet { positions, provenance: Provenance::Oracle };
        let _ = TrackerGridConfig::default();
        let targets =
            crate::tracks::displacements(&tracks, patch, DisplacementMode::PerStep).unwrap();
        // Temporal slots: k tracked frames give k displacement slots
        // (last duplicated); a 2-slot grid consumes the first two.
        let grid_k = TokenGrid { slots: k, rows: 2, cols: 2 };
        let target_rows = motion_target_rows::<f64>(&targets, &grid_k).unwrap();
        let mut pred = Array2::<f64>::zeros(target_rows.dim());
        for mut row in pred.rows_mut() {
            row[0] = 3.0 / patch as f64;
            row[1] = -2.0 / patch as f64;
        }
        let mask = sample_mask(
            &MaskingConfig {
                mask_ratio: 0.5,
                strategy: MaskStrategy::RandomTube,
                ..MaskingConfig::default()
            },
            &grid_k,
            None,
            7,
        )
        .unwrap();
        let loss = masked_loss(&pred, &target_rows, std::slice::from_ref(&mask)).unwrap();
        assert!(loss < 1e-10, "motion loss {loss}");
        let _ = grid;
    }
}
