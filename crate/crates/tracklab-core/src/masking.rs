//! Tube-structured mask sampling over the token grid.
//!
//! Every strategy picks a set of visible spatial cells and replicates it
//! across all temporal slots, so a grid column is either fully visible
//! or fully masked. The motion-aware family consumes a per-cell saliency
//! map; `random_tube` ignores it. All strategies are deterministic given
//! (config, saliency, seed).

use crate::error::{Error, Result};
use crate::tokenizer::TokenGrid;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    RandomTube,
    MotionBins,
    BernoulliHighlow,
    Sorting,
    UniformTopk,
    ExcludeTopk,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 6] = [
        MaskStrategy::RandomTube,
        MaskStrategy::MotionBins,
        MaskStrategy::BernoulliHighlow,
        MaskStrategy::Sorting,
        MaskStrategy::UniformTopk,
        MaskStrategy::ExcludeTopk,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MaskStrategy::RandomTube => "random_tube",
            MaskStrategy::MotionBins => "motion_bins",
            MaskStrategy::BernoulliHighlow => "bernoulli_highlow",
            MaskStrategy::Sorting => "sorting",
            MaskStrategy::UniformTopk => "uniform_topk",
            MaskStrategy::ExcludeTopk => "exclude_topk",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown masking strategy \"{name}\"")))
    }

    pub fn uses_saliency(&self) -> bool {
        !matches!(self, MaskStrategy::RandomTube)
    }
}

/// Which scalar per grid cell drives the motion-aware strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencySource {
    /// Mean over slots of the displacement magnitude.
    #[default]
    MeanMagnitude,
    /// Magnitude of the mean signed displacement (experimental).
    DirectedMean,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaskingConfig {
    /// Fraction of spatial cells hidden from the encoder, in (0, 1).
    pub mask_ratio: f64,
    pub strategy: MaskStrategy,
    /// Fraction of the visible quota taken from the high-motion bin.
    pub motion_ratio: f64,
    /// Pool size for the top-k strategies.
    pub top_k: usize,
    pub saliency: SaliencySource,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_ratio: 0.9,
            strategy: MaskStrategy::MotionBins,
            motion_ratio: 0.5,
            top_k: 0,
            saliency: SaliencySource::MeanMagnitude,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask ratio must lie strictly inside (0, 1), got {}",
                self.mask_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.motion_ratio) {
            return Err(Error::Config(format!(
                "motion ratio must lie in [0, 1], got {}",
                self.motion_ratio
            )));
        }
        Ok(())
    }

    /// Visible spatial-cell count for a grid with `cells` spatial cells,
    /// using round-half-away-from-zero.
    pub fn visible_cells(&self, cells: usize) -> usize {
        round_half_away((1.0 - self.mask_ratio) * cells as f64)
    }
}

/// Round-half-away-from-zero for non-negative quantities.
pub fn round_half_away(x: f64) -> usize {
    debug_assert!(x >= 0.0);
    (x + 0.5).floor() as usize
}

/// Records that a bin could not fill its quota and the remainder was
/// drawn from the other bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QuotaClip {
    pub requested_high: usize,
    pub granted_high: usize,
    pub requested_low: usize,
    pub granted_low: usize,
}

/// A visible/masked partition of the token grid with tube structure.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMap {
    pub grid: TokenGrid,
    /// Sorted spatial cell indices (r * cols + c) the encoder sees.
    pub visible_spatial: Vec<usize>,
    /// Sorted token indices, visible set.
    pub visible_tokens: Vec<usize>,
    /// Sorted token indices, masked set.
    pub masked_tokens: Vec<usize>,
    /// Per-token visibility for O(1) lookups.
    pub token_visible: Vec<bool>,
    /// Present when a bin quota had to be clipped.
    pub clipped: Option<QuotaClip>,
}

impl MaskMap {
    fn from_spatial(grid: TokenGrid, mut spatial: Vec<usize>, clipped: Option<QuotaClip>) -> Self {
        spatial.sort_unstable();
        let cells = grid.rows * grid.cols;
        let mut cell_visible = vec![false; cells];
        for &s in &spatial {
            cell_visible[s] = true;
        }
        let n = grid.tokens();
        let mut token_visible = vec![false; n];
        let mut visible_tokens = Vec::with_capacity(spatial.len() * grid.slots);
        let mut masked_tokens = Vec::with_capacity(n - spatial.len() * grid.slots);
        for i in 0..n {
            let (_, r, c) = grid.unflatten(i);
            if cell_visible[r * grid.cols + c] {
                token_visible[i] = true;
                visible_tokens.push(i);
            } else {
                masked_tokens.push(i);
            }
        }
        MaskMap { grid, visible_spatial: spatial, visible_tokens, masked_tokens, token_visible, clipped }
    }

    /// Builds a map from an explicit visible cell set. Unlike the
    /// samplers this accepts degenerate partitions (everything masked or
    /// everything visible), which decoder analysis occasionally wants.
    pub fn with_visible_cells(grid: TokenGrid, cells: Vec<usize>) -> Result<Self> {
        let total = grid.rows * grid.cols;
        let mut seen = vec![false; total];
        for &c in &cells {
            if c >= total {
                return Err(Error::Input(format!("cell index {c} outside a {total}-cell grid")));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Input(format!("cell index {c} listed twice")));
            }
        }
        Ok(Self::from_spatial(grid, cells, None))
    }

    pub fn visible_count(&self) -> usize {
        self.visible_tokens.len()
    }
    pub fn masked_count(&self) -> usize {
        self.masked_tokens.len()
    }
}

/// Dispatches on the configured strategy. `saliency` may be `None` only
/// for `random_tube`.
pub fn sample_mask(
    cfg: &MaskingConfig,
    grid: &TokenGrid,
    saliency: Option<&Array2<f64>>,
    seed: u64,
) -> Result<MaskMap> {
    cfg.validate()?;
    if cfg.strategy == MaskStrategy::RandomTube {
        return random_tube_mask(cfg, grid, seed);
    }
    let m = saliency.ok_or_else(|| {
        Error::Input(format!("strategy {} needs a saliency map", cfg.strategy.name()))
    })?;
    if m.dim() != (grid.rows, grid.cols) {
        return Err(Error::Input(format!(
            "saliency map is {:?}, grid wants ({}, {})",
            m.dim(),
            grid.rows,
            grid.cols
        )));
    }
    if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Input("saliency map must be finite and non-negative".into()));
    }
    match cfg.strategy {
        MaskStrategy::RandomTube => unreachable!(),
        MaskStrategy::MotionBins => motion_bins_mask(cfg, grid, m, seed),
        MaskStrategy::BernoulliHighlow => bernoulli_highlow_mask(cfg, grid, m, seed),
        MaskStrategy::Sorting => sorting_mask(cfg, grid, m),
        MaskStrategy::UniformTopk => uniform_topk_mask(cfg, grid, m, seed),
        MaskStrategy::ExcludeTopk => exclude_topk_mask(cfg, grid, m, seed),
    }
}

fn mask_rng(seed: u64) -> ChaCha8Rng {
    crate::rng::stream(seed, "mask", 0)
}

fn check_quota(cfg: &MaskingConfig, grid: &TokenGrid) -> Result<usize> {
    cfg.validate()?;
    let cells = grid.rows * grid.cols;
    let n_vis = cfg.visible_cells(cells);
    if n_vis == 0 || n_vis == cells {
        return Err(Error::Config(format!(
            "degenerate mask: {n_vis} of {cells} cells visible (mask ratio {})",
            cfg.mask_ratio
        )));
    }
    Ok(n_vis)
}

/// Uniform choice of `amount` distinct items from `pool`, preserving no
/// particular order.
fn draw_uniform(rng: &mut ChaCha8Rng, pool: &[usize], amount: usize) -> Vec<usize> {
    debug_assert!(amount <= pool.len());
    rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Visible cells drawn uniformly without replacement over the whole grid.
pub fn random_tube_mask(cfg: &MaskingConfig, grid: &TokenGrid, seed: u64) -> Result<MaskMap> {
    let n_vis = check_quota(cfg, grid)?;
    let cells = grid.rows * grid.cols;
    let pool: Vec<usize> = (0..cells).collect();
    let mut rng = mask_rng(seed);
    let spatial = draw_uniform(&mut rng, &pool, n_vis);
    Ok(MaskMap::from_spatial(*grid, spatial, None))
}

/// Splits cells at the median saliency (stable in grid index, lower
/// indices tie into the low bin), then draws each bin's quota uniformly.
pub fn motion_bins_mask(
    cfg: &MaskingConfig,
    grid: &TokenGrid,
    saliency: &Array2<f64>,
    seed: u64,
) -> Result<MaskMap> {
    let n_vis = check_quota(cfg, grid)?;
    if n_vis < 2 {
        return Err(Error::Config(format!(
            "two-bin masking needs at least 2 visible cells, got {n_vis}"
        )));
    }
    let cells = grid.rows * grid.cols;
    let flat: Vec<f64> = saliency.iter().copied().collect();
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]).then(a.cmp(&b)));
    let low_size = cells.div_ceil(2);
    let (low_bin, high_bin) = order.split_at(low_size);

    let want_high = round_half_away(cfg.motion_ratio * n_vis as f64).min(n_vis);
    let want_low = n_vis - want_high;
    let take_high = want_high.min(high_bin.len());
    let take_low = want_low.min(low_bin.len());
    // Spill unmet quota into the other bin; the caller learns via metadata.
    let spill_to_low = want_high - take_high;
    let spill_to_high = want_low - take_low;
    let granted_high = take_high + spill_to_high;
    let granted_low = take_low + spill_to_low;
    debug_assert!(granted_high <= high_bin.len() && granted_low <= low_bin.len());

    let mut rng = mask_rng(seed);
    let mut spatial = draw_uniform(&mut rng, high_bin, granted_high);
    spatial.extend(draw_uniform(&mut rng, low_bin, granted_low));
    let clipped = (granted_high != want_high || granted_low != want_low).then_some(QuotaClip {
        requested_high: want_high,
        granted_high,
        requested_low: want_low,
        granted_low,
    });
    Ok(MaskMap::from_spatial(*grid, spatial, clipped))
}

/// Sequential weighted draws without replacement; weights that sum to
/// nothing degrade to a uniform draw over the remaining cells.
fn draw_weighted(
    rng: &mut ChaCha8Rng,
    weights: &[f64],
    taken: &mut [bool],
    amount: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(amount);
    for _ in 0..amount {
        let total: f64 = weights
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .map(|(_, w)| w.max(0.0))
            .sum();
        let pick = if total > 0.0 && total.is_finite() {
            let mut u = rng.gen_range(0.0..total);
            let mut chosen = None;
            for (i, &w) in weights.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                let w = w.max(0.0);
                if u < w {
                    chosen = Some(i);
                    break;
                }
                u -= w;
            }
            // Guard against accumulated rounding pushing u past the end.
            chosen.unwrap_or_else(|| {
                weights.iter().enumerate().rev().find(|(i, _)| !taken[*i]).map(|(i, _)| i).unwrap()
            })
        } else {
            let remaining: Vec<usize> =
                (0..weights.len()).filter(|&i| !taken[i]).collect();
            remaining[rng.gen_range(0..remaining.len())]
        };
        taken[pick] = true;
        out.push(pick);
    }
    out
}

/// High quota proportional to saliency, remainder proportional to the
/// affine complement (max - saliency) over the cells not yet drawn.
pub fn bernoulli_highlow_mask(
    cfg: &MaskingConfig,
    grid: &TokenGrid,
    saliency: &Array2<f64>,
    seed: u64,
) -> Result<MaskMap> {
    let n_vis = check_quota(cfg, grid)?;
    let flat: Vec<f64> = saliency.iter().copied().collect();
    let n_high = round_half_away(cfg.motion_ratio * n_vis as f64).min(n_vis);
    let max = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let complement: Vec<f64> = flat.iter().map(|&v| max - v).collect();

    let mut rng = mask_rng(seed);
    let mut taken = vec![false; flat.len()];
    let mut spatial = draw_weighted(&mut rng, &flat, &mut taken, n_high);
    spatial.extend(draw_weighted(&mut rng, &complement, &mut taken, n_vis - n_high));
    Ok(MaskMap::from_spatial(*grid, spatial, None))
}

/// Deterministic extremes: the top of the saliency ranking for the high
/// quota, then the bottom of what remains for the low quota.
pub fn sorting_mask(
    cfg: &MaskingConfig,
    grid: &TokenGrid,
    saliency: &Array2<f64>,
) -> Result<MaskMap> {
    let n_vis = check_quota(cfg, grid)?;
    let cells = grid.rows * grid.cols;
    let flat: Vec<f64> = saliency.iter().copied().collect();
    let n_high = round_half_away(cfg.motion_ratio * n_vis as f64).min(n_vis);

    let mut desc: Vec<usize> = (0..cells).collect();
    desc.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
    let mut spatial: Vec<usize> = desc[..n_high].to_vec();
    let mut rest: Vec<usize> = desc[n_high..].to_vec();
    rest.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]).then(a.cmp(&b)));
    spatial.extend_from_slice(&rest[..n_vis - n_high]);
    Ok(MaskMap::from_spatial(*grid, spatial, None))
}

fn top_k_by_saliency(flat: &[f64], k: usize) -> Vec<usize> {
    let mut desc: Vec<usize> = (0..flat.len()).collect();
    desc.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
    desc.truncate(k);
    desc
}

/// Uniform draw restricted to the k most salient cells.
pub fn uniform_topk_mask(
    cfg: &MaskingConfig,
    grid: &TokenGrid,
    saliency: &Array2<f64>,
    seed: u64,
) -> Result<MaskMap> {
    let n_vis = check_quota(cfg, grid)?;
    let cells = grid.rows * grid.cols;
    if cfg.top_k < n_vis || cfg.top_k > cells {
        return Err(Error::Config(format!(
            "top-k pool of {} cannot supply {n_vis} visible cells (grid has {cells})",
            cfg.top_k
        )));
    }
    let flat: Vec<f64> = saliency.iter().copied().collect();
    let pool = top_k_by_saliency(&flat, cfg.top_k);
    let mut rng = mask_rng(seed);
    let spatial = draw_uniform(&mut rng, &pool, n_vis);
    Ok(MaskMap::from_spatial(*grid, spatial, None))
}

/// Uniform draw over everything except the k most salient cells.
pub fn exclude_topk_mask(
    cfg: &MaskingConfig,
    grid: &TokenGrid,
    saliency: &Array2<f64>,
    seed: u64,
) -> Result<MaskMap> {
    let n_vis = check_quota(cfg, grid)?;
    let cells = grid.rows * grid.cols;
    if cfg.top_k >= cells || cells - cfg.top_k < n_vis {
        return Err(Error::Config(format!(
            "excluding top {} of {cells} cells leaves too few for {n_vis} visible",
            cfg.top_k
        )));
    }
    let flat: Vec<f64> = saliency.iter().copied().collect();
    let excluded = top_k_by_saliency(&flat, cfg.top_k);
    let mut banned = vec![false; cells];
    for &i in &excluded {
        banned[i] = true;
    }
    let pool: Vec<usize> = (0..cells).filter(|&i| !banned[i]).collect();
    let mut rng = mask_rng(seed);
    let spatial = draw_uniform(&mut rng, &pool, n_vis);
    Ok(MaskMap::from_spatial(*grid, spatial, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(slots: usize, rows: usize, cols: usize) -> TokenGrid {
        TokenGrid { slots, rows, cols }
    }

    fn desk_grid() -> TokenGrid {
        grid(8, 4, 4)
    }

    fn cfg(strategy: MaskStrategy) -> MaskingConfig {
        MaskingConfig { strategy, top_k: 8, ..MaskingConfig::default() }
    }

    fn ramp_saliency(rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(r, c)| (r * cols + c) as f64)
    }

    #[test]
    fn visible_quota_rounding() {
        let c = MaskingConfig::default();
        assert_eq!(c.visible_cells(196), 20);
        assert_eq!(c.visible_cells(16), 2);
        assert_eq!(round_half_away(0.5), 1);
        assert_eq!(round_half_away(1.4999), 1);
        assert_eq!(round_half_away(2.5), 3);
        assert_eq!(round_half_away(0.0), 0);
    }

    #[test]
    fn large_grid_counts() {
        let g = grid(8, 14, 14);
        let m = random_tube_mask(&cfg(MaskStrategy::RandomTube), &g, 7).unwrap();
        assert_eq!(m.visible_spatial.len(), 20);
        assert_eq!(m.visible_count(), 20 * 8);
        assert_eq!(m.masked_count(), 176 * 8);
    }

    #[test]
    fn degenerate_quotas_rejected() {
        let g = desk_grid();
        let mut c = cfg(MaskStrategy::RandomTube);
        c.mask_ratio = 0.999;
        assert!(matches!(random_tube_mask(&c, &g, 0), Err(Error::Config(_))));
        c.mask_ratio = 0.001;
        assert!(matches!(random_tube_mask(&c, &g, 0), Err(Error::Config(_))));
        c.mask_ratio = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn motion_bins_needs_two_visible() {
        let g = grid(2, 3, 3);
        let mut c = cfg(MaskStrategy::MotionBins);
        c.mask_ratio = 0.9; // round(0.9) = 1 visible
        let m = ramp_saliency(3, 3);
        assert!(matches!(motion_bins_mask(&c, &g, &m, 0), Err(Error::Config(_))));
    }

    #[test]
    fn partition_and_tube_structure_all_strategies() {
        let g = desk_grid();
        let sal = ramp_saliency(4, 4);
        for strategy in MaskStrategy::ALL {
            for seed in 0..50u64 {
                let m = sample_mask(&cfg(strategy), &g, Some(&sal), seed).unwrap();
                assert_eq!(
                    m.visible_count() + m.masked_count(),
                    g.tokens(),
                    "{} partition",
                    strategy.name()
                );
                let mut seen = vec![false; g.tokens()];
                for &t in m.visible_tokens.iter().chain(m.masked_tokens.iter()) {
                    assert!(!seen[t], "{} token {t} appears twice", strategy.name());
                    seen[t] = true;
                }
                // Tube property: visibility depends only on (r, c).
                for i in 0..g.tokens() {
                    let (_, r, c) = g.unflatten(i);
                    let expect = m.visible_spatial.binary_search(&(r * g.cols + c)).is_ok();
                    assert_eq!(m.token_visible[i], expect, "{} tube", strategy.name());
                }
                assert_eq!(m.visible_spatial.len(), 2, "{} count", strategy.name());
            }
        }
    }

    #[test]
    fn masks_are_deterministic_and_seed_sensitive() {
        let g = desk_grid();
        let sal = ramp_saliency(4, 4);
        for strategy in MaskStrategy::ALL {
            let a = sample_mask(&cfg(strategy), &g, Some(&sal), 123).unwrap();
            let b = sample_mask(&cfg(strategy), &g, Some(&sal), 123).unwrap();
            assert_eq!(a, b, "{} determinism", strategy.name());
        }
        // Randomized strategies respond to the seed (some seed pair differs).
        for strategy in [
            MaskStrategy::RandomTube,
            MaskStrategy::MotionBins,
            MaskStrategy::BernoulliHighlow,
            MaskStrategy::UniformTopk,
            MaskStrategy::ExcludeTopk,
        ] {
            let base = sample_mask(&cfg(strategy), &g, Some(&sal), 0).unwrap();
            let differs = (1..50u64).any(|s| {
                sample_mask(&cfg(strategy), &g, Some(&sal), s).unwrap().visible_spatial
                    != base.visible_spatial
            });
            assert!(differs, "{} never varies with the seed", strategy.name());
        }
    }

    #[test]
    fn motion_bins_quota_split() {
        // 14x14 grid: visible 20, motion ratio 0.5 → 10 high, 10 low;
        // ratio 0.25 → 5 high, 15 low. The ramp saliency makes bin
        // membership explicit: low bin = indices 0..98.
        let g = grid(2, 14, 14);
        let sal = ramp_saliency(14, 14);
        for (ratio, want_high, want_low) in [(0.5, 10, 10), (0.25, 5, 15)] {
            let mut c = cfg(MaskStrategy::MotionBins);
            c.motion_ratio = ratio;
            for seed in 0..20 {
                let m = motion_bins_mask(&c, &g, &sal, seed).unwrap();
                let high = m.visible_spatial.iter().filter(|&&s| s >= 98).count();
                let low = m.visible_spatial.iter().filter(|&&s| s < 98).count();
                assert_eq!((high, low), (want_high, want_low), "ratio {ratio}");
                assert!(m.clipped.is_none());
            }
        }
    }

    #[test]
    fn constant_saliency_ties_fill_low_bin_by_index() {
        // All-equal saliency: the low bin is exactly the first half of the
        // grid indices. With motion ratio 1 every draw comes from the
        // complement (high) half.
        let g = desk_grid();
        let sal = Array2::from_elem((4, 4), 3.25);
        let mut c = cfg(MaskStrategy::MotionBins);
        c.motion_ratio = 1.0;
        for seed in 0..30 {
            let m = motion_bins_mask(&c, &g, &sal, seed).unwrap();
            assert!(m.visible_spatial.iter().all(|&s| s >= 8), "high bin is indices 8..16");
        }
        c.motion_ratio = 0.0;
        for seed in 0..30 {
            let m = motion_bins_mask(&c, &g, &sal, seed).unwrap();
            assert!(m.visible_spatial.iter().all(|&s| s < 8), "low bin is indices 0..8");
        }
    }

    #[test]
    fn quota_clipping_spills_and_records() {
        // 2x2 grid: low bin {0, 1}, high bin {2, 3}. Visible 3 with motion
        // ratio 1 wants 3 from a 2-cell high bin.
        let g = grid(2, 2, 2);
        let sal = ramp_saliency(2, 2);
        let c = MaskingConfig {
            mask_ratio: 0.25,
            strategy: MaskStrategy::MotionBins,
            motion_ratio: 1.0,
            top_k: 0,
            saliency: SaliencySource::MeanMagnitude,
        };
        let m = motion_bins_mask(&c, &g, &sal, 5).unwrap();
        assert_eq!(m.visible_spatial.len(), 3);
        let clip = m.clipped.expect("clipping must be recorded");
        assert_eq!(clip.requested_high, 3);
        assert_eq!(clip.granted_high, 2);
        assert_eq!(clip.requested_low, 0);
        assert_eq!(clip.granted_low, 1);
        // Both high cells present, one low cell.
        assert!(m.visible_spatial.contains(&2) && m.visible_spatial.contains(&3));
    }

    #[test]
    fn sorting_is_deterministic_extremes() {
        let g = desk_grid();
        let mut sal = ramp_saliency(4, 4);
        sal[[0, 0]] = 100.0; // make index 0 the most salient
        let mut c = cfg(MaskStrategy::Sorting);
        c.motion_ratio = 0.5;
        let m = sorting_mask(&c, &g, &sal).unwrap();
        // n_vis=2, n_high=1: top by saliency is cell 0; bottom of the rest
        // is cell 1 (value 1.0).
        assert_eq!(m.visible_spatial, vec![0, 1]);
    }

    #[test]
    fn sorting_breaks_ties_by_index() {
        let g = desk_grid();
        let sal = Array2::from_elem((4, 4), 7.0);
        let mut c = cfg(MaskStrategy::Sorting);
        c.motion_ratio = 0.5;
        let m = sorting_mask(&c, &g, &sal).unwrap();
        // All tied: high pick = index 0, low pick = lowest remaining = 1.
        assert_eq!(m.visible_spatial, vec![0, 1]);
    }

    #[test]
    fn uniform_topk_stays_inside_pool() {
        let g = desk_grid();
        let sal = ramp_saliency(4, 4);
        let mut c = cfg(MaskStrategy::UniformTopk);
        c.top_k = 4; // top cells are indices 12..16
        for seed in 0..40 {
            let m = uniform_topk_mask(&c, &g, &sal, seed).unwrap();
            assert!(m.visible_spatial.iter().all(|&s| s >= 12));
        }
        c.top_k = 1;
        assert!(matches!(uniform_topk_mask(&c, &g, &sal, 0), Err(Error::Config(_))));
    }

    #[test]
    fn exclude_topk_avoids_pool() {
        let g = desk_grid();
        let sal = ramp_saliency(4, 4);
        let mut c = cfg(MaskStrategy::ExcludeTopk);
        c.top_k = 4;
        for seed in 0..40 {
            let m = exclude_topk_mask(&c, &g, &sal, seed).unwrap();
            assert!(m.visible_spatial.iter().all(|&s| s < 12));
        }
        c.top_k = 15;
        assert!(matches!(exclude_topk_mask(&c, &g, &sal, 0), Err(Error::Config(_))));
    }

    #[test]
    fn bernoulli_dominant_cell_nearly_always_visible() {
        // 14x14 grid, visible 20, motion ratio 0.5: ten proportional
        // draws against a 1000x dominant weight almost surely hit it.
        let g = grid(2, 14, 14);
        let mut sal = Array2::from_elem((14, 14), 1.0);
        sal[[7, 7]] = 1000.0;
        let dominant = 7 * 14 + 7;
        let mut c = cfg(MaskStrategy::BernoulliHighlow);
        c.motion_ratio = 0.5;
        let trials = 10_000;
        let mut hits = 0;
        for seed in 0..trials {
            let m = bernoulli_highlow_mask(&c, &g, &sal, seed).unwrap();
            if m.visible_spatial.contains(&dominant) {
                hits += 1;
            }
        }
        let rate = hits as f64 / trials as f64;
        assert!(rate > 0.99, "dominant cell visible in only {rate:.4} of draws");
    }

    #[test]
    fn random_tube_frequencies_near_uniform() {
        let g = desk_grid();
        let c = cfg(MaskStrategy::RandomTube);
        let trials = 10_000u64;
        let mut counts = vec![0u64; 16];
        for seed in 0..trials {
            for &s in &random_tube_mask(&c, &g, seed).unwrap().visible_spatial {
                counts[s] += 1;
            }
        }
        // Each cell is visible with probability 2/16 = 1/8.
        let p = 2.0 / 16.0;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        let expect = trials as f64 * p;
        for (i, &n) in counts.iter().enumerate() {
            assert!(
                (n as f64 - expect).abs() < 4.0 * sigma,
                "cell {i}: {n} vs {expect:.1} +- {sigma:.1}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scale_invariance_except_bernoulli(
            alpha in 1e-3f64..1e3,
            seed in 0u64..1000,
            values in proptest::collection::vec(0.0f64..10.0, 16),
        ) {
            let g = desk_grid();
            let sal = Array2::from_shape_vec((4, 4), values).unwrap();
            let scaled = sal.mapv(|v| v * alpha);
            for strategy in MaskStrategy::ALL {
                if strategy == MaskStrategy::BernoulliHighlow {
                    continue;
                }
                let a = sample_mask(&cfg(strategy), &g, Some(&sal), seed).unwrap();
                let b = sample_mask(&cfg(strategy), &g, Some(&scaled), seed).unwrap();
                prop_assert_eq!(&a.visible_spatial, &b.visible_spatial,
                    "{} is not scale invariant", strategy.name());
            }
        }

        #[test]
        fn partition_property(
            seed in 0u64..5000,
            values in proptest::collection::vec(0.0f64..5.0, 16),
            ratio in 0.0f64..=1.0,
        ) {
            let g = desk_grid();
            let sal = Array2::from_shape_vec((4, 4), values).unwrap();
            for strategy in MaskStrategy::ALL {
                let mut c = cfg(strategy);
                c.motion_ratio = ratio;
                let m = sample_mask(&c, &g, Some(&sal), seed).unwrap();
                prop_assert_eq!(m.visible_count() + m.masked_count(), g.tokens());
                prop_assert_eq!(m.visible_spatial.len(), 2);
                let slots_visible = m.visible_tokens.len() / m.visible_spatial.len();
                prop_assert_eq!(slots_visible, g.slots);
            }
        }
    }
}
