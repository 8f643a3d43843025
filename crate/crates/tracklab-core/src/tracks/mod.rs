//! Point tracks and the motion targets derived from them.
//!
//! A [`TrackSet`] holds per-query positions over the tracked frames of a
//! clip, organized on a grid. [`displacements`] turns tracks into
//! per-slot displacement targets normalized by the patch size, plus the
//! motion-saliency map consumed by masking. [`upsample`] interpolates the
//! sparse targets onto a denser lattice. Tracks can be perturbed with
//! Gaussian noise and round-tripped through a small binary file format.

pub mod trkm;

use crate::error::{Error, Result};
use crate::synth::ClipShape;
use ndarray::{Array2, Array4};
use rand_distr::{Distribution, StandardNormal};

pub use trkm::{read_tracks, write_tracks};

/// Where a track set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Provenance {
    Oracle,
    File,
    Noisy,
}

/// Grid-organized point tracks: `positions[[k, r, c, d]]` is the position
/// of query `(r, c)` at tracked frame `k`, with `d` indexing `(x, y)`.
/// Positions are kept in f64 in memory; the file format stores f32.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub positions: Array4<f64>,
    pub provenance: Provenance,
}

impl TrackSet {
    pub fn tracked_frames(&self) -> usize {
        self.positions.shape()[0]
    }
    pub fn grid_rows(&self) -> usize {
        self.positions.shape()[1]
    }
    pub fn grid_cols(&self) -> usize {
        self.positions.shape()[2]
    }
}

/// Tracker configuration: `grid_factor` multiplies the patch grid (1 =
/// one query per patch center, the standard setup; v = dense tracking of
/// v^2 points per patch), `stride` is the temporal sampling step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TrackerGridConfig {
    pub grid_factor: usize,
    pub stride: usize,
}

impl Default for TrackerGridConfig {
    fn default() -> Self {
        TrackerGridConfig { grid_factor: 1, stride: 2 }
    }
}

/// Per-step (default) or relative-to-frame-0 displacement convention.
/// Cumulative mode is exposed for experimentation only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplacementMode {
    #[default]
    PerStep,
    Cumulative,
}

/// Displacement targets on a `rows x cols` lattice over `slots` temporal
/// slots, normalized by patch size. `upsample` records the interpolation
/// factor relative to the lattice the targets were extracted on (1 =
/// as-extracted). `saliency` is the per-source-query mean displacement
/// magnitude; after upsampling it stays at the source resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTargets {
    /// (slots, rows, cols, 2), units of patch size.
    pub displacements: Array4<f64>,
    pub upsample: usize,
    /// (source rows, source cols); see [`MotionTargets::patch_saliency`].
    pub saliency: Array2<f64>,
}

impl MotionTargets {
    pub fn slots(&self) -> usize {
        self.displacements.shape()[0]
    }
    pub fn rows(&self) -> usize {
        self.displacements.shape()[1]
    }
    pub fn cols(&self) -> usize {
        self.displacements.shape()[2]
    }

    /// Saliency aggregated onto the patch grid (mean over the sub-cells
    /// of each patch). Identity when the saliency already lives on the
    /// patch grid; errors if the resolutions are incompatible.
    pub fn patch_saliency(&self, patch_rows: usize, patch_cols: usize) -> Result<Array2<f64>> {
        aggregate_mean(&self.saliency, patch_rows, patch_cols)
    }

    /// Saliency from the magnitude of the time-averaged signed
    /// displacement (the experimental "directed" variant), on the same
    /// lattice as `saliency`.
    pub fn directed_saliency(&self) -> Array2<f64> {
        let (slots, rows, cols) = (self.slots(), self.rows(), self.cols());
        let per_point = Array2::from_shape_fn((rows, cols), |(r, c)| {
            let mut sx = 0.0;
            let mut sy = 0.0;
            for k in 0..slots {
                sx += self.displacements[[k, r, c, 0]];
                sy += self.displacements[[k, r, c, 1]];
            }
            let inv = 1.0 / slots as f64;
            ((sx * inv).powi(2) + (sy * inv).powi(2)).sqrt()
        });
        let (sr, sc) = self.saliency.dim();
        aggregate_mean(&per_point, sr, sc).expect("displacement lattice divides saliency lattice")
    }
}

/// Mean-pools `map` onto a `rows x cols` grid.
pub fn aggregate_mean(map: &Array2<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let (mr, mc) = map.dim();
    if mr == rows && mc == cols {
        return Ok(map.clone());
    }
    if rows == 0 || cols == 0 || mr % rows != 0 || mc % cols != 0 {
        return Err(Error::Input(format!(
            "cannot aggregate {mr}x{mc} saliency onto {rows}x{cols} grid"
        )));
    }
    let (fr, fc) = (mr / rows, mc / cols);
    let norm = 1.0 / (fr * fc) as f64;
    Ok(Array2::from_shape_fn((rows, cols), |(r, c)| {
        let mut s = 0.0;
        for i in 0..fr {
            for j in 0..fc {
                s += map[[r * fr + i, c * fc + j]];
            }
        }
        s * norm
    }))
}

/// Query positions for a tracker grid, row-major.
///
/// With `grid_factor` 1 these are the patch centers
/// `((c + 0.5) p - 0.5, (r + 0.5) p - 0.5)`; with factor v they are the
/// centers of the v x v sub-cells of each patch, matching the sample
/// lattice of [`upsample`]. Also returns `(rows, cols)` of the grid.
pub fn grid_queries(
    shape: &ClipShape,
    patch: usize,
    grid_factor: usize,
) -> Result<(Vec<[f64; 2]>, usize, usize)> {
    if grid_factor == 0 {
        return Err(Error::Config("grid factor must be positive".into()));
    }
    shape.validate_for(patch, 1)?;
    let rows = shape.height / patch * grid_factor;
    let cols = shape.width / patch * grid_factor;
    let cell = patch as f64 / grid_factor as f64;
    let mut q = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            q.push([(c as f64 + 0.5) * cell - 0.5, (r as f64 + 0.5) * cell - 0.5]);
        }
    }
    Ok((q, rows, cols))
}

/// Normalized temporal-difference displacement targets.
///
/// Per-step mode: `m[k] = (pos[k+1] - pos[k]) / p` for every slot but the
/// last, which duplicates the previous difference so each of the
/// `tracked_frames` slots carries a 2-vector. Cumulative mode:
/// `m[k] = (pos[k] - pos[0]) / p`. The saliency entry for a query is the
/// mean over slots of its displacement magnitude.
pub fn displacements(
    tracks: &TrackSet,
    patch: usize,
    mode: DisplacementMode,
) -> Result<MotionTargets> {
    if patch == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let (k, rows, cols) = (tracks.tracked_frames(), tracks.grid_rows(), tracks.grid_cols());
    if k < 2 {
        return Err(Error::Input(format!("need at least 2 tracked frames, got {k}")));
    }
    let inv_p = 1.0 / patch as f64;
    let mut m = Array4::<f64>::zeros((k, rows, cols, 2));
    for r in 0..rows {
        for c in 0..cols {
            for d in 0..2 {
                match mode {
                    DisplacementMode::PerStep => {
                        for s in 0..k - 1 {
                            m[[s, r, c, d]] = (tracks.positions[[s + 1, r, c, d]]
                                - tracks.positions[[s, r, c, d]])
                                * inv_p;
                        }
                        m[[k - 1, r, c, d]] = m[[k - 2, r, c, d]];
                    }
                    DisplacementMode::Cumulative => {
                        for s in 0..k {
                            m[[s, r, c, d]] = (tracks.positions[[s, r, c, d]]
                                - tracks.positions[[0, r, c, d]])
                                * inv_p;
                        }
                    }
                }
            }
        }
    }
    let saliency = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let mut acc = 0.0;
        for s in 0..k {
            acc += (m[[s, r, c, 0]].powi(2) + m[[s, r, c, 1]].powi(2)).sqrt();
        }
        acc / k as f64
    });
    Ok(MotionTargets { displacements: m, upsample: 1, saliency })
}

/// Bilinear upsampling of displacement targets by factor `v`.
///
/// Dense samples sit at the centers of the v x v sub-cells of each source
/// cell; coordinates outside the source lattice are edge-clamped, so the
/// interpolation is exact for affine fields at interior points. The
/// saliency map is recomputed from the dense field and aggregated back to
/// the source lattice.
pub fn upsample(targets: &MotionTargets, v: usize) -> Result<MotionTargets> {
    if targets.upsample != 1 {
        return Err(Error::Config("targets are already upsampled".into()));
    }
    if !matches!(v, 1 | 2 | 4) {
        return Err(Error::Config(format!("unsupported upsample factor {v}")));
    }
    if v == 1 {
        return Ok(targets.clone());
    }
    let (slots, rows, cols) = (targets.slots(), targets.rows(), targets.cols());
    if rows < 2 || cols < 2 {
        return Err(Error::Config("upsampling needs at least a 2x2 source lattice".into()));
    }
    let (dr, dc) = (rows * v, cols * v);
    let mut dense = Array4::<f64>::zeros((slots, dr, dc, 2));

    // Precompute the separable interpolation weights per dense row/col.
    let axis_weights = |n: usize, dn: usize| -> Vec<(usize, f64)> {
        (0..dn)
            .map(|i| {
                let u = (i / v) as f64 + ((i % v) as f64 + 0.5) / v as f64 - 0.5;
                let u = u.clamp(0.0, (n - 1) as f64);
                let i0 = (u.floor() as usize).min(n - 2);
                (i0, u - i0 as f64)
            })
            .collect()
    };
    let rw = axis_weights(rows, dr);
    let cw = axis_weights(cols, dc);

    for k in 0..slots {
        for (ri, &(r0, a)) in rw.iter().enumerate() {
            for (ci, &(c0, b)) in cw.iter().enumerate() {
                for d in 0..2 {
                    let f00 = targets.displacements[[k, r0, c0, d]];
                    let f01 = targets.displacements[[k, r0, c0 + 1, d]];
                    let f10 = targets.displacements[[k, r0 + 1, c0, d]];
                    let f11 = targets.displacements[[k, r0 + 1, c0 + 1, d]];
                    dense[[k, ri, ci, d]] =
                        (1.0 - a) * ((1.0 - b) * f00 + b * f01) + a * ((1.0 - b) * f10 + b * f11);
                }
            }
        }
    }

    let dense_sal = Array2::from_shape_fn((dr, dc), |(r, c)| {
        let mut acc = 0.0;
        for k in 0..slots {
            acc += (dense[[k, r, c, 0]].powi(2) + dense[[k, r, c, 1]].powi(2)).sqrt();
        }
        acc / slots as f64
    });
    let saliency = aggregate_mean(&dense_sal, rows, cols)?;
    Ok(MotionTargets { displacements: dense, upsample: v, saliency })
}

/// Noise model for robustness experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Independent Gaussian offsets on every position.
    Spatial,
    /// One Gaussian offset per tracked frame, shared by all queries.
    Temporal,
}

/// Adds Gaussian track noise and clamps back into frame bounds. The
/// output is marked [`Provenance::Noisy`] regardless of sigma.
pub fn inject_noise(
    tracks: &TrackSet,
    mode: NoiseMode,
    sigma: f64,
    seed: u64,
    width: usize,
    height: usize,
) -> Result<TrackSet> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Input(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    let mut rng = crate::rng::stream(seed, "tracks.noise", 0);
    let mut positions = tracks.positions.clone();
    let (k, rows, cols) = (tracks.tracked_frames(), tracks.grid_rows(), tracks.grid_cols());
    let (wmax, hmax) = (width as f64 - 1.0, height as f64 - 1.0);
    match mode {
        NoiseMode::Spatial => {
            for v in positions.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * n;
            }
        }
        NoiseMode::Temporal => {
            for s in 0..k {
                let nx: f64 = StandardNormal.sample(&mut rng);
                let ny: f64 = StandardNormal.sample(&mut rng);
                for r in 0..rows {
                    for c in 0..cols {
                        positions[[s, r, c, 0]] += sigma * nx;
                        positions[[s, r, c, 1]] += sigma * ny;
                    }
                }
            }
        }
    }
    for s in 0..k {
        for r in 0..rows {
            for c in 0..cols {
                positions[[s, r, c, 0]] = positions[[s, r, c, 0]].clamp(0.0, wmax);
                positions[[s, r, c, 1]] = positions[[s, r, c, 1]].clamp(0.0, hmax);
            }
        }
    }
    Ok(TrackSet { positions, provenance: Provenance::Noisy })
}
