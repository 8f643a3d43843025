//! Tubelet tokenization: cutting clips into non-overlapping space-time
//! blocks, flattening them to per-token pixel vectors, embedding those
//! vectors, and the fixed sinusoidal positional code.
//!
//! Token order is temporal-major then row-major: token `i` maps to grid
//! coordinate `(k, r, c)` with `i = (k * rows + r) * cols + c`. Within a
//! token, pixels are flattened in (frame, row, col, channel) order.

use crate::error::{Error, Result};
use crate::linalg::{self, Real};
use crate::synth::ClipShape;
use ndarray::{Array2, Array4, ArrayView1, ArrayView2};

/// Tubelet geometry and embedding width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TokenizerConfig {
    /// Frames per tubelet.
    pub tubelet_depth: usize,
    /// Spatial patch edge in pixels.
    pub patch: usize,
    /// Token embedding dimension.
    pub dim: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { tubelet_depth: 2, patch: 16, dim: 64 }
    }
}

impl TokenizerConfig {
    /// Checks divisibility against a clip shape and returns the token grid.
    pub fn grid(&self, shape: &ClipShape) -> Result<TokenGrid> {
        if self.dim < 6 || self.dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embed dim must be even and at least 6 for the 3-axis positional code, got {}",
                self.dim
            )));
        }
        shape.validate_for(self.patch, self.tubelet_depth)?;
        Ok(TokenGrid {
            slots: shape.frames / self.tubelet_depth,
            rows: shape.height / self.patch,
            cols: shape.width / self.patch,
        })
    }

    /// Length of one raw tubelet vector for `channels`-channel clips.
    pub fn raw_len(&self, channels: usize) -> usize {
        self.tubelet_depth * self.patch * self.patch * channels
    }
}

/// Token lattice: temporal slots x spatial rows x spatial cols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TokenGrid {
    pub slots: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn tokens(&self) -> usize {
        self.slots * self.rows * self.cols
    }

    #[inline]
    pub fn flatten(&self, k: usize, r: usize, c: usize) -> usize {
        debug_assert!(k < self.slots && r < self.rows && c < self.cols);
        (k * self.rows + r) * self.cols + c
    }

    #[inline]
    pub fn unflatten(&self, i: usize) -> (usize, usize, usize) {
        debug_assert!(i < self.tokens());
        let c = i % self.cols;
        let rest = i / self.cols;
        (rest / self.rows, rest % self.rows, c)
    }
}

/// Flattens a clip into per-token raw pixel vectors, one row per token.
pub fn patchify<F: Real>(pixels: &Array4<f32>, cfg: &TokenizerConfig) -> Result<Array2<F>> {
    let (t_total, h, w, ch) = pixels.dim();
    let shape = ClipShape { frames: t_total, height: h, width: w, channels: ch };
    let grid = cfg.grid(&shape)?;
    let (t, p) = (cfg.tubelet_depth, cfg.patch);
    let mut out = Array2::<F>::zeros((grid.tokens(), cfg.raw_len(ch)));
    for k in 0..grid.slots {
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let row = grid.flatten(k, r, c);
                let mut dst = out.row_mut(row);
                let dst = dst.as_slice_mut().expect("row-major output");
                let mut j = 0;
                for f in 0..t {
                    for y in 0..p {
                        for x in 0..p {
                            for d in 0..ch {
                                dst[j] =
                                    F::from_f32(pixels[[k * t + f, r * p + y, c * p + x, d]]);
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reassembles per-token pixel vectors into a clip. Exact inverse of
/// [`patchify`] for matching shapes.
pub fn unpatchify<F: Real>(
    tokens: &ArrayView2<F>,
    shape: &ClipShape,
    cfg: &TokenizerConfig,
) -> Result<Array4<F>> {
    let grid = cfg.grid(shape)?;
    let (t, p, ch) = (cfg.tubelet_depth, cfg.patch, shape.channels);
    if tokens.dim() != (grid.tokens(), cfg.raw_len(ch)) {
        return Err(Error::Config(format!(
            "token matrix is {:?}, expected ({}, {})",
            tokens.dim(),
            grid.tokens(),
            cfg.raw_len(ch)
        )));
    }
    let mut out = Array4::<F>::zeros((shape.frames, shape.height, shape.width, ch));
    for k in 0..grid.slots {
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let row = tokens.row(grid.flatten(k, r, c));
                let src = row.as_slice().expect("row-major input");
                let mut j = 0;
                for f in 0..t {
                    for y in 0..p {
                        for x in 0..p {
                            for d in 0..ch {
                                out[[k * t + f, r * p + y, c * p + x, d]] = src[j];
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Splits `dim` channels over the three grid axes (slot, row, col) as
/// evenly as sin/cos pairing allows, biasing leftovers toward the
/// earlier axes.
pub fn axis_split(dim: usize) -> [usize; 3] {
    debug_assert!(dim >= 6 && dim % 2 == 0);
    let base = dim / 6 * 2;
    let mut split = [base; 3];
    let mut rem = dim - 3 * base;
    let mut axis = 0;
    while rem >= 2 {
        split[axis] += 2;
        rem -= 2;
        axis += 1;
    }
    split
}

/// Fixed sinusoidal positional code, one row per token: the
/// concatenation of standard 1D sin/cos codes of the slot, row, and
/// column coordinates. Depends only on the grid and `dim`.
pub fn positional_embedding<F: Real>(grid: &TokenGrid, dim: usize) -> Result<Array2<F>> {
    if dim < 6 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "embed dim must be even and at least 6 for the 3-axis positional code, got {dim}"
        )));
    }
    let split = axis_split(dim);
    let mut pe = Array2::<F>::zeros((grid.tokens(), dim));
    for i in 0..grid.tokens() {
        let (k, r, c) = grid.unflatten(i);
        let mut offset = 0;
        for (axis, pos) in [(0, k), (1, r), (2, c)] {
            let d_axis = split[axis];
            for j in 0..d_axis / 2 {
                let freq = (10000f64).powf(-(2.0 * j as f64) / d_axis as f64);
                let angle = pos as f64 * freq;
                pe[[i, offset + 2 * j]] = F::from_f64(angle.sin());
                pe[[i, offset + 2 * j + 1]] = F::from_f64(angle.cos());
            }
            offset += d_axis;
        }
    }
    Ok(pe)
}

/// Token embedding: `tau = raw * W^T + b + PE`, rows are tokens. `weight`
/// is `(dim, raw_len)`, matching how the model stores linear layers.
pub fn embed<F: Real>(
    raw: &ArrayView2<F>,
    weight: &ArrayView2<F>,
    bias: &ArrayView1<F>,
    pe: &ArrayView2<F>,
) -> Result<Array2<F>> {
    let (n, raw_len) = raw.dim();
    let (dim, w_in) = weight.dim();
    if w_in != raw_len || bias.len() != dim || pe.dim() != (n, dim) {
        return Err(Error::Config(format!(
            "embedding shapes disagree: raw ({n}, {raw_len}), weight ({dim}, {w_in}), bias {}, positional {:?}",
            bias.len(),
            pe.dim()
        )));
    }
    let mut out = Array2::<F>::zeros((n, dim));
    linalg::gemm(F::one(), raw, false, weight, true, F::zero(), &mut out.view_mut());
    for (mut row, pe_row) in out.rows_mut().into_iter().zip(pe.rows()) {
        for ((v, &b), &p) in row.iter_mut().zip(bias.iter()).zip(pe_row.iter()) {
            *v = *v + b + p;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_clip, ClipShape, SceneConfig};
    use ndarray::Array1;

    #[test]
    fn token_counts_match_formula() {
        let cfg = TokenizerConfig::default();
        let g = cfg.grid(&ClipShape { frames: 16, height: 224, width: 224, channels: 3 }).unwrap();
        assert_eq!(g.tokens(), 1568);
        assert_eq!((g.slots, g.rows, g.cols), (8, 14, 14));
        let g = cfg.grid(&ClipShape { frames: 16, height: 64, width: 64, channels: 3 }).unwrap();
        assert_eq!(g.tokens(), 128);
        assert_eq!((g.slots, g.rows, g.cols), (8, 4, 4));
    }

    #[test]
    fn divisibility_violations_are_config_errors() {
        let cfg = TokenizerConfig { tubelet_depth: 3, patch: 16, dim: 64 };
        let shape = ClipShape { frames: 16, height: 64, width: 64, channels: 3 };
        assert!(matches!(cfg.grid(&shape), Err(Error::Config(_))));
        let cfg = TokenizerConfig { tubelet_depth: 2, patch: 15, dim: 64 };
        assert!(matches!(cfg.grid(&shape), Err(Error::Config(_))));
        let cfg = TokenizerConfig { tubelet_depth: 2, patch: 16, dim: 7 };
        assert!(matches!(cfg.grid(&shape), Err(Error::Config(_))));
    }

    #[test]
    fn flatten_unflatten_bijection() {
        let grid = TokenGrid { slots: 8, rows: 4, cols: 4 };
        for i in 0..grid.tokens() {
            let (k, r, c) = grid.unflatten(i);
            assert_eq!(grid.flatten(k, r, c), i);
        }
        // Temporal-major then row-major order.
        assert_eq!(grid.flatten(0, 0, 0), 0);
        assert_eq!(grid.flatten(0, 0, 3), 3);
        assert_eq!(grid.flatten(0, 1, 0), 4);
        assert_eq!(grid.flatten(1, 0, 0), 16);
    }

    #[test]
    fn patchify_places_exact_pixel_blocks() {
        let shape = ClipShape { frames: 4, height: 32, width: 32, channels: 3 };
        let cfg = TokenizerConfig { tubelet_depth: 2, patch: 16, dim: 64 };
        // Encode coordinates in pixel values to track the mapping.
        let pixels = Array4::from_shape_fn((4, 32, 32, 3), |(f, y, x, d)| {
            (f * 100000 + y * 1000 + x * 10 + d) as f32
        });
        let raw: Array2<f64> = patchify(&pixels, &cfg).unwrap();
        let grid = cfg.grid(&shape).unwrap();
        // Token (k=1, r=0, c=1) first element is pixel (f=2, y=0, x=16, d=0).
        let row = raw.row(grid.flatten(1, 0, 1));
        assert_eq!(row[0], 200160.0);
        // Last element is pixel (f=3, y=15, x=31, d=2).
        assert_eq!(row[row.len() - 1], 315312.0);
    }

    #[test]
    fn constant_clip_yields_identical_tokens() {
        let cfg = TokenizerConfig::default();
        let pixels = Array4::from_elem((16, 64, 64, 3), 0.375f32);
        let raw: Array2<f32> = patchify(&pixels, &cfg).unwrap();
        let first = raw.row(0).to_owned();
        for row in raw.rows() {
            assert_eq!(row, first.view());
        }
    }

    #[test]
    fn unpatchify_inverts_patchify_exactly() {
        let shape = ClipShape { frames: 16, height: 64, width: 64, channels: 3 };
        let cfg = TokenizerConfig::default();
        let clip = generate_clip(31, &shape, &SceneConfig::default()).unwrap();
        let raw: Array2<f32> = patchify(&clip.pixels, &cfg).unwrap();
        let back = unpatchify(&raw.view(), &shape, &cfg).unwrap();
        assert_eq!(back, clip.pixels);

        let raw64: Array2<f64> = patchify(&clip.pixels, &cfg).unwrap();
        let back64 = unpatchify(&raw64.view(), &shape, &cfg).unwrap();
        let max_err = back64
            .iter()
            .zip(clip.pixels.iter())
            .map(|(a, &b)| (a - b as f64).abs())
            .fold(0.0, f64::max)
            ;
        assert_eq!(max_err, 0.0);
    }

    #[test]
    fn axis_split_is_even_and_sums() {
        assert_eq!(axis_split(64), [22, 22, 20]);
        assert_eq!(axis_split(48), [16, 16, 16]);
        assert_eq!(axis_split(16), [6, 6, 4]);
        assert_eq!(axis_split(6), [2, 2, 2]);
        for d in (6..=128).step_by(2) {
            let s = axis_split(d);
            assert_eq!(s.iter().sum::<usize>(), d);
            assert!(s.iter().all(|&x| x % 2 == 0 && x >= 2));
        }
    }

    #[test]
    fn positional_code_depends_only_on_coordinates() {
        let grid = TokenGrid { slots: 8, rows: 4, cols: 4 };
        let a: Array2<f64> = positional_embedding(&grid, 64).unwrap();
        let b: Array2<f64> = positional_embedding(&grid, 64).unwrap();
        assert_eq!(a, b);
        // Tokens sharing (r, c) but different k differ only in the k block.
        let split = axis_split(64);
        let i = grid.flatten(2, 1, 3);
        let j = grid.flatten(5, 1, 3);
        for d in split[0]..64 {
            assert_eq!(a[[i, d]], a[[j, d]], "channel {d} should match across slots");
        }
        assert!((0..split[0]).any(|d| a[[i, d]] != a[[j, d]]));
        // All tokens get distinct codes.
        for i in 0..grid.tokens() {
            for j in i + 1..grid.tokens() {
                let row_i = a.row(i);
                let row_j = a.row(j);
                assert!(row_i != row_j, "tokens {i} and {j} share a positional code");
            }
        }
    }

    #[test]
    fn zero_clip_zero_params_embed_to_positional_code() {
        let shape = ClipShape { frames: 16, height: 64, width: 64, channels: 3 };
        let cfg = TokenizerConfig::default();
        let grid = cfg.grid(&shape).unwrap();
        let pixels = Array4::zeros((16, 64, 64, 3));
        let raw: Array2<f64> = patchify(&pixels, &cfg).unwrap();
        let pe: Array2<f64> = positional_embedding(&grid, cfg.dim).unwrap();
        let mut rng = crate::rng::stream(3, "tokenizer-test", 0);
        use rand::Rng;
        let weight =
            Array2::from_shape_fn((cfg.dim, cfg.raw_len(3)), |_| rng.gen_range(-1.0..1.0));
        let bias = Array1::<f64>::zeros(cfg.dim);
        let tau =
            embed(&raw.view(), &weight.view(), &bias.view(), &pe.view()).unwrap();
        assert_eq!(tau, pe);
    }

    #[test]
    fn identical_pixels_differ_by_positional_code() {
        let cfg = TokenizerConfig::default();
        let shape = ClipShape { frames: 16, height: 64, width: 64, channels: 3 };
        let grid = cfg.grid(&shape).unwrap();
        let pixels = Array4::from_elem((16, 64, 64, 3), 0.25f32);
        let raw: Array2<f64> = patchify(&pixels, &cfg).unwrap();
        let pe: Array2<f64> = positional_embedding(&grid, cfg.dim).unwrap();
        let mut rng = crate::rng::stream(4, "tokenizer-test", 1);
        use rand::Rng;
        let weight =
            Array2::from_shape_fn((cfg.dim, cfg.raw_len(3)), |_| rng.gen_range(-0.1..0.1));
        let bias = Array1::from_shape_fn(cfg.dim, |_| rng.gen_range(-0.1..0.1));
        let tau = embed(&raw.view(), &weight.view(), &bias.view(), &pe.view()).unwrap();
        for i in [0usize, 17, 90] {
            for j in [5usize, 63, 127] {
                for d in 0..cfg.dim {
                    let lhs = tau[[i, d]] - tau[[j, d]];
                    let rhs = pe[[i, d]] - pe[[j, d]];
                    assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn embed_shape_mismatch_is_config_error() {
        let raw = Array2::<f64>::zeros((8, 10));
        let weight = Array2::<f64>::zeros((6, 11));
        let bias = Array1::<f64>::zeros(6);
        let pe = Array2::<f64>::zeros((8, 6));
        assert!(matches!(
            embed(&raw.view(), &weight.view(), &bias.view(), &pe.view()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn embed_output_shape() {
        let raw = Array2::<f32>::zeros((128, 24));
        let weight = Array2::<f32>::zeros((32, 24));
        let bias = Array1::<f32>::zeros(32);
        let pe = Array2::<f32>::zeros((128, 32));
        let tau = embed(&raw.view(), &weight.view(), &bias.view(), &pe.view()).unwrap();
        assert_eq!(tau.dim(), (128, 32));
    }
}
