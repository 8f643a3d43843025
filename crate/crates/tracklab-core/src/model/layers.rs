//! Transformer building blocks with explicit forward caches and
//! hand-derived backward passes.
//!
//! Shapes follow one convention: activations are `(rows, dim)` with
//! `rows = batch * seq`, weights are `(out, in)` so a linear layer is
//! `y = x W^T + b`. Backward functions accumulate into the gradient
//! store (callers zero it once per step) and return the gradient with
//! respect to their input.

use super::params::{GradStore, Params};
use crate::error::{Error, Result};
use crate::linalg::{self, flat, lane_dot, lane_sum, lane_total, Real, LANES};
use ndarray::{Array2, Array3, ArrayView2, s};

pub const LN_EPS: f64 = 1e-5;

/// Parameter indices of one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_w: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_w: usize,
    pub ln2_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

/// Parameter indices of a block stack plus its closing norm.
#[derive(Debug, Clone)]
pub struct TrunkParams {
    pub blocks: Vec<BlockParams>,
    /// Absent for depth 0, which makes the trunk an exact identity.
    pub norm: Option<(usize, usize)>,
    pub heads: usize,
}

pub fn linear_fwd<F: Real>(p: &Params<F>, w: usize, b: usize, x: &ArrayView2<F>) -> Array2<F> {
    let wv = p.view2(w);
    let bias = p.data(b);
    let mut y = Array2::<F>::zeros((x.nrows(), wv.nrows()));
    linalg::gemm(F::one(), x, false, &wv, true, F::zero(), &mut y.view_mut());
    let ys = y.as_slice_mut().expect("fresh array");
    for row in ys.chunks_exact_mut(bias.len()) {
        for (v, &bb) in row.iter_mut().zip(bias) {
            *v = *v + bb;
        }
    }
    y
}

/// Returns dx; accumulates dW += dy^T x and db += column sums of dy.
pub fn linear_bwd<F: Real>(
    p: &Params<F>,
    w: usize,
    b: usize,
    x: &ArrayView2<F>,
    dy: &ArrayView2<F>,
    g: &mut GradStore<F>,
) -> Array2<F> {
    {
        let mut dw = g.view2_mut(w);
        linalg::gemm(F::one(), dy, true, x, false, F::one(), &mut dw);
    }
    {
        let db = g.data_mut(b);
        let mut scratch = None;
        let dyf = flat(dy, &mut scratch);
        for row in dyf.chunks_exact(db.len()) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
    }
    let wv = p.view2(w);
    let mut dx = Array2::<F>::zeros(x.dim());
    linalg::gemm(F::one(), dy, false, &wv, false, F::zero(), &mut dx.view_mut());
    dx
}

#[derive(Debug, Clone)]
pub struct LnCache<F> {
    /// Normalized pre-scale activations.
    pub xhat: Array2<F>,
    /// Per-row reciprocal standard deviation.
    pub inv_std: Vec<F>,
}

pub fn layernorm_fwd<F: Real>(
    p: &Params<F>,
    w: usize,
    b: usize,
    x: &ArrayView2<F>,
) -> (Array2<F>, LnCache<F>) {
    let gamma = p.data(w);
    let beta = p.data(b);
    let (rows, dim) = x.dim();
    let mut xhat = Array2::<F>::zeros((rows, dim));
    let mut inv_std = Vec::with_capacity(rows);
    let inv_d = F::from_f64(1.0 / dim as f64);
    let eps = F::from_f64(LN_EPS);
    let mut y = Array2::<F>::zeros((rows, dim));
    let mut scratch = None;
    let xs = flat(x, &mut scratch);
    let xh = xhat.as_slice_mut().expect("fresh array");
    let ys = y.as_slice_mut().expect("fresh array");
    for r in 0..rows {
        let xr = &xs[r * dim..(r + 1) * dim];
        let mean = lane_sum(xr) * inv_d;
        let main = dim - dim % LANES;
        let mut acc = [F::zero(); LANES];
        for c in xr[..main].chunks_exact(LANES) {
            for i in 0..LANES {
                let d = c[i] - mean;
                acc[i] = acc[i] + d * d;
            }
        }
        let mut var = lane_total(acc);
        for &v in &xr[main..] {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_d;
        let istd = (var + eps).sqrt().recip();
        inv_std.push(istd);
        let xhr = &mut xh[r * dim..(r + 1) * dim];
        let yr = &mut ys[r * dim..(r + 1) * dim];
        for c in 0..dim {
            let h = (xr[c] - mean) * istd;
            xhr[c] = h;
            yr[c] = gamma[c] * h + beta[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Standard layer-norm backward from the cached normalized activations:
/// dx = istd/D * (D*dh - sum(dh) - xhat * sum(dh*xhat)), dh = dy*gamma.
pub fn layernorm_bwd<F: Real>(
    p: &Params<F>,
    w: usize,
    b: usize,
    cache: &LnCache<F>,
    dy: &ArrayView2<F>,
    g: &mut GradStore<F>,
) -> Array2<F> {
    let gamma = p.data(w);
    let (rows, dim) = dy.dim();
    let mut dx = Array2::<F>::zeros((rows, dim));
    let d_f = F::from_f64(dim as f64);
    let mut scratch = None;
    let dys = flat(dy, &mut scratch);
    let xh = cache.xhat.as_slice().expect("cache arrays are standard layout");
    let dxs = dx.as_slice_mut().expect("fresh array");
    {
        let dgamma = g.data_mut(w);
        for r in 0..rows {
            let dyr = &dys[r * dim..(r + 1) * dim];
            let xhr = &xh[r * dim..(r + 1) * dim];
            for c in 0..dim {
                dgamma[c] = dgamma[c] + dyr[c] * xhr[c];
            }
        }
    }
    {
        let dbeta = g.data_mut(b);
        for r in 0..rows {
            let dyr = &dys[r * dim..(r + 1) * dim];
            for c in 0..dim {
                dbeta[c] = dbeta[c] + dyr[c];
            }
        }
    }
    let main = dim - dim % LANES;
    for r in 0..rows {
        let dyr = &dys[r * dim..(r + 1) * dim];
        let xhr = &xh[r * dim..(r + 1) * dim];
        let mut acc_dh = [F::zero(); LANES];
        let mut acc_dhx = [F::zero(); LANES];
        let mut c0 = 0;
        while c0 + LANES <= main {
            for i in 0..LANES {
                let dh = dyr[c0 + i] * gamma[c0 + i];
                acc_dh[i] = acc_dh[i] + dh;
                acc_dhx[i] = acc_dhx[i] + dh * xhr[c0 + i];
            }
            c0 += LANES;
        }
        let mut sum_dh = lane_total(acc_dh);
        let mut sum_dh_xhat = lane_total(acc_dhx);
        for c in c0..dim {
            let dh = dyr[c] * gamma[c];
            sum_dh = sum_dh + dh;
            sum_dh_xhat = sum_dh_xhat + dh * xhr[c];
        }
        let scale = cache.inv_std[r] / d_f;
        let dxr = &mut dxs[r * dim..(r + 1) * dim];
        for c in 0..dim {
            let dh = dyr[c] * gamma[c];
            dxr[c] = scale * (d_f * dh - sum_dh - xhr[c] * sum_dh_xhat);
        }
    }
    dx
}

const GELU_KAPPA: f64 = 0.7978845608028654;
const GELU_CUBIC: f64 = 0.044715;

#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let k = F::from_f64(GELU_KAPPA);
    let c = F::from_f64(GELU_CUBIC);
    let half = F::from_f64(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (F::one() + u.tanh_fast())
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let k = F::from_f64(GELU_KAPPA);
    let c = F::from_f64(GELU_CUBIC);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh_fast();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * k * (F::one() + three * c * x * x)
}

#[derive(Debug, Clone)]
pub struct AttnCache<F> {
    /// Input to the qkv projection (post-norm activations).
    pub x_norm: Array2<F>,
    /// Concatenated q|k|v, shape (rows, 3*dim).
    pub qkv: Array2<F>,
    /// Attention probabilities, one (seq, seq) slab per (clip, head).
    pub probs: Array3<F>,
    /// Head-concatenated context, input to the output projection.
    pub ctx: Array2<F>,
}

/// Multi-head self-attention over `batch` independent sequences of
/// length `seq` (rows grouped clip-major).
#[allow(clippy::too_many_arguments)]
pub fn attention_fwd<F: Real>(
    p: &Params<F>,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    x_norm: Array2<F>,
    batch: usize,
    heads: usize,
) -> (Array2<F>, AttnCache<F>) {
    let (rows, dim) = x_norm.dim();
    debug_assert_eq!(rows % batch, 0);
    let seq = rows / batch;
    debug_assert_eq!(dim % heads, 0);
    let hd = dim / heads;
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());

    let qkv = linear_fwd(p, qkv_w, qkv_b, &x_norm.view());
    let mut probs = Array3::<F>::zeros((batch * heads, seq, seq));
    let mut ctx = Array2::<F>::zeros((rows, dim));
    for b in 0..batch {
        let row0 = b * seq;
        for h in 0..heads {
            let q = qkv.slice(s![row0..row0 + seq, h * hd..(h + 1) * hd]);
            let k = qkv.slice(s![row0..row0 + seq, dim + h * hd..dim + (h + 1) * hd]);
            let v = qkv.slice(s![row0..row0 + seq, 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
            {
                let mut pslab = probs.slice_mut(s![b * heads + h, .., ..]);
                linalg::gemm(scale, &q, false, &k, true, F::zero(), &mut pslab);
                softmax_rows(pslab.into_slice().expect("slab of a fresh array"), seq);
            }
            let pview = probs.slice(s![b * heads + h, .., ..]);
            let mut cslab = ctx.slice_mut(s![row0..row0 + seq, h * hd..(h + 1) * hd]);
            linalg::gemm(F::one(), &pview, false, &v, false, F::zero(), &mut cslab);
        }
    }
    let out = linear_fwd(p, proj_w, proj_b, &ctx.view());
    (out, AttnCache { x_norm, qkv, probs, ctx })
}

/// Numerically stable in-place softmax over each `width`-long row of a
/// flat buffer.
fn softmax_rows<F: Real>(buf: &mut [F], width: usize) {
    let main = width - width % LANES;
    for row in buf.chunks_exact_mut(width) {
        let mut mx = [F::from_f64(f64::NEG_INFINITY); LANES];
        for c in row[..main].chunks_exact(LANES) {
            for i in 0..LANES {
                if c[i] > mx[i] {
                    mx[i] = c[i];
                }
            }
        }
        let mut max = mx[0];
        for &m in &mx[1..] {
            if m > max {
                max = m;
            }
        }
        for &v in &row[main..] {
            if v > max {
                max = v;
            }
        }
        // One pass both exponentiates and accumulates the normalizer.
        let mut acc = [F::zero(); LANES];
        for c in row[..main].chunks_exact_mut(LANES) {
            for i in 0..LANES {
                let e = (c[i] - max).exp_fast();
                c[i] = e;
                acc[i] = acc[i] + e;
            }
        }
        let mut total = lane_total(acc);
        for v in row[main..].iter_mut() {
            let e = (*v - max).exp_fast();
            *v = e;
            total = total + e;
        }
        let inv = total.recip();
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Returns the gradient w.r.t. the attention input (post-norm
/// activations); accumulates all projection parameter gradients.
#[allow(clippy::too_many_arguments)]
pub fn attention_bwd<F: Real>(
    p: &Params<F>,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    cache: &AttnCache<F>,
    dy: &ArrayView2<F>,
    batch: usize,
    heads: usize,
    g: &mut GradStore<F>,
) -> Array2<F> {
    let (rows, dim) = cache.x_norm.dim();
    let seq = rows / batch;
    let hd = dim / heads;
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());

    let dctx = linear_bwd(p, proj_w, proj_b, &cache.ctx.view(), dy, g);
    let mut dqkv = Array2::<F>::zeros((rows, 3 * dim));
    let mut dp = Array2::<F>::zeros((seq, seq));
    for b in 0..batch {
        let row0 = b * seq;
        for h in 0..heads {
            let q = cache.qkv.slice(s![row0..row0 + seq, h * hd..(h + 1) * hd]);
            let k = cache
                .qkv
                .slice(s![row0..row0 + seq, dim + h * hd..dim + (h + 1) * hd]);
            let v = cache
                .qkv
                .slice(s![row0..row0 + seq, 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
            let pview = cache.probs.slice(s![b * heads + h, .., ..]);
            let dc = dctx.slice(s![row0..row0 + seq, h * hd..(h + 1) * hd]);

            // dV = P^T dc ; dP = dc V^T
            {
                let mut dv = dqkv
                    .slice_mut(s![row0..row0 + seq, 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
                linalg::gemm(F::one(), &pview, true, &dc, false, F::zero(), &mut dv);
            }
            linalg::gemm(F::one(), &dc, false, &v, true, F::zero(), &mut dp.view_mut());

            // In-place softmax backward: dp <- P * (dP - sum(dP * P)).
            softmax_bwd_rows(
                dp.as_slice_mut().expect("fresh array"),
                pview.to_slice().expect("slab of a standard-layout array"),
                seq,
            );

            // dQ = scale * ds K ; dK = scale * ds^T Q.
            {
                let mut dq = dqkv.slice_mut(s![row0..row0 + seq, h * hd..(h + 1) * hd]);
                linalg::gemm(scale, &dp.view(), false, &k, false, F::zero(), &mut dq);
            }
            {
                let mut dk =
                    dqkv.slice_mut(s![row0..row0 + seq, dim + h * hd..dim + (h + 1) * hd]);
                linalg::gemm(scale, &dp.view(), true, &q, false, F::zero(), &mut dk);
            }
        }
    }
    linear_bwd(p, qkv_w, qkv_b, &cache.x_norm.view(), &dqkv.view(), g)
}

/// In-place half of softmax backward: given upstream dP and the forward
/// probabilities P row by row, overwrites dP with P * (dP - dP . P).
fn softmax_bwd_rows<F: Real>(dp: &mut [F], pr: &[F], width: usize) {
    for (drow, prow) in dp.chunks_exact_mut(width).zip(pr.chunks_exact(width)) {
        let dot = lane_dot(drow, prow);
        for (d0, &p0) in drow.iter_mut().zip(prow.iter()) {
            *d0 = p0 * (*d0 - dot);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    pub ln1: LnCache<F>,
    pub attn: AttnCache<F>,
    /// Residual sum after attention, input to the MLP half.
    pub x_mid: Array2<F>,
    pub ln2: LnCache<F>,
    /// MLP input (post-norm).
    pub x_norm2: Array2<F>,
    /// Pre-activation of the hidden layer.
    pub fc1_pre: Array2<F>,
    /// Hidden activations, input to fc2.
    pub gelu_out: Array2<F>,
}

pub fn block_fwd<F: Real>(
    p: &Params<F>,
    bp: &BlockParams,
    x: &Array2<F>,
    batch: usize,
    heads: usize,
) -> (Array2<F>, BlockCache<F>) {
    let (y_ln1, ln1) = layernorm_fwd(p, bp.ln1_w, bp.ln1_b, &x.view());
    let (mut x_mid, attn) =
        attention_fwd(p, bp.qkv_w, bp.qkv_b, bp.proj_w, bp.proj_b, y_ln1, batch, heads);
    add_rows(&mut x_mid, x);
    let (x_norm2, ln2) = layernorm_fwd(p, bp.ln2_w, bp.ln2_b, &x_mid.view());
    let fc1_pre = linear_fwd(p, bp.fc1_w, bp.fc1_b, &x_norm2.view());
    let gelu_out = fc1_pre.mapv(gelu);
    let mut out = linear_fwd(p, bp.fc2_w, bp.fc2_b, &gelu_out.view());
    add_rows(&mut out, &x_mid);
    (out, BlockCache { ln1, attn, x_mid, ln2, x_norm2, fc1_pre, gelu_out })
}

/// Elementwise dst += src over two same-shape standard-layout matrices.
fn add_rows<F: Real>(dst: &mut Array2<F>, src: &Array2<F>) {
    debug_assert_eq!(dst.dim(), src.dim());
    let d = dst.as_slice_mut().expect("residual buffers are standard layout");
    let s = src.as_slice().expect("residual buffers are standard layout");
    for (a, &b) in d.iter_mut().zip(s) {
        *a = *a + b;
    }
}

pub fn block_bwd<F: Real>(
    p: &Params<F>,
    bp: &BlockParams,
    cache: &BlockCache<F>,
    dy: &Array2<F>,
    batch: usize,
    heads: usize,
    g: &mut GradStore<F>,
) -> Array2<F> {
    // MLP half: out = x_mid + fc2(gelu(fc1(ln2(x_mid)))).
    let mut dfc1_pre = linear_bwd(p, bp.fc2_w, bp.fc2_b, &cache.gelu_out.view(), &dy.view(), g);
    {
        let dv = dfc1_pre.as_slice_mut().expect("gradient buffers are standard layout");
        let pre = cache.fc1_pre.as_slice().expect("cached activations are standard layout");
        for (d, &x) in dv.iter_mut().zip(pre) {
            *d = *d * gelu_grad(x);
        }
    }
    let dx_norm2 = linear_bwd(p, bp.fc1_w, bp.fc1_b, &cache.x_norm2.view(), &dfc1_pre.view(), g);
    let mut dx_mid = layernorm_bwd(p, bp.ln2_w, bp.ln2_b, &cache.ln2, &dx_norm2.view(), g);
    add_rows(&mut dx_mid, dy);

    // Attention half: x_mid = x + attn(ln1(x)).
    let dx_norm1 = attention_bwd(
        p,
        bp.qkv_w,
        bp.qkv_b,
        bp.proj_w,
        bp.proj_b,
        &cache.attn,
        &dx_mid.view(),
        batch,
        heads,
        g,
    );
    let dx_branch = layernorm_bwd(p, bp.ln1_w, bp.ln1_b, &cache.ln1, &dx_norm1.view(), g);
    add_rows(&mut dx_mid, &dx_branch);
    dx_mid
}

#[derive(Debug, Clone)]
pub struct TrunkCache<F> {
    pub blocks: Vec<BlockCache<F>>,
    pub norm: Option<LnCache<F>>,
}

/// Branch-free non-finite detection: x - x is +0 for every finite x and
/// NaN for infinities and NaNs, and NaN survives summation, so the
/// reduction is zero exactly when every entry is finite.
pub fn all_finite<F: Real>(a: &Array2<F>) -> bool {
    let mut scratch = None;
    let s = flat(&a.view(), &mut scratch);
    let mut acc = [F::zero(); LANES];
    let main = s.len() - s.len() % LANES;
    for c in s[..main].chunks_exact(LANES) {
        for i in 0..LANES {
            acc[i] = acc[i] + (c[i] - c[i]);
        }
    }
    let mut total = lane_total(acc);
    for &v in &s[main..] {
        total = total + (v - v);
    }
    total == F::zero()
}

/// Runs a block stack plus its closing norm. Depth 0 is an exact
/// identity. `label` names the trunk in numeric-failure errors.
pub fn trunk_fwd<F: Real>(
    p: &Params<F>,
    tp: &TrunkParams,
    mut x: Array2<F>,
    batch: usize,
    label: &str,
) -> Result<(Array2<F>, TrunkCache<F>)> {
    let mut blocks = Vec::with_capacity(tp.blocks.len());
    for (l, bp) in tp.blocks.iter().enumerate() {
        let (y, cache) = block_fwd(p, bp, &x, batch, tp.heads);
        if !all_finite(&y) {
            return Err(Error::Numeric(format!(
                "non-finite activations after {label} layer {l}"
            )));
        }
        blocks.push(cache);
        x = y;
    }
    let norm = match tp.norm {
        Some((w, b)) => {
            let (y, cache) = layernorm_fwd(p, w, b, &x.view());
            if !all_finite(&y) {
                return Err(Error::Numeric(format!(
                    "non-finite activations after {label} output norm"
                )));
            }
            x = y;
            Some(cache)
        }
        None => None,
    };
    Ok((x, TrunkCache { blocks, norm }))
}

pub fn trunk_bwd<F: Real>(
    p: &Params<F>,
    tp: &TrunkParams,
    cache: &TrunkCache<F>,
    mut dy: Array2<F>,
    batch: usize,
    g: &mut GradStore<F>,
) -> Array2<F> {
    if let (Some((w, b)), Some(ln)) = (tp.norm, cache.norm.as_ref()) {
        dy = layernorm_bwd(p, w, b, ln, &dy.view(), g);
    }
    for (bp, bc) in tp.blocks.iter().zip(cache.blocks.iter()).rev() {
        dy = block_bwd(p, bp, bc, &dy, batch, tp.heads, g);
    }
    dy
}
