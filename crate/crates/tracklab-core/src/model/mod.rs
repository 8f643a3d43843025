//! Masked-clip transformer: tubelet embedding, an encoder over visible
//! tokens, and decoders that fill masked slots from a learned mask token.
//!
//! `VideoModel` owns the architecture (layout, positional tables) but not
//! the parameters; `Params` arenas are created, initialized, and updated
//! by callers. All forward/backward entry points are generic over the
//! scalar so gradient verification can run the identical code in f64.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::masking::MaskMap;
use crate::rng;
use crate::tokenizer::{self, TokenGrid};
use layers::{BlockParams, TrunkCache, TrunkParams};
use ndarray::Array2;
use params::{GradStore, Params};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const INIT_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    Separate,
    Joint,
}

impl DecoderMode {
    pub fn name(&self) -> &'static str {
        match self {
            DecoderMode::Separate => "separate",
            DecoderMode::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(DecoderMode::Separate),
            "joint" => Ok(DecoderMode::Joint),
            other => Err(Error::Config(format!("unknown decoder mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderHead {
    Spatial,
    Motion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub decoder_mode: DecoderMode,
    /// Whether the model carries a motion decoder (or motion head) at all.
    pub motion_enabled: bool,
    /// Flattened tubelet length t*p*p*C; input width of the embedding.
    pub raw_len: usize,
    /// Spatial head width: raw_len for pixel targets, teacher dim otherwise.
    pub spatial_out: usize,
    /// Motion head width per token: 2 * upsample^2.
    pub motion_out: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            enc_depth: 4,
            enc_heads: 4,
            dec_dim: 48,
            dec_depth: 2,
            dec_heads: 4,
            decoder_mode: DecoderMode::Separate,
            motion_enabled: true,
            raw_len: 1536,
            spatial_out: 1536,
            motion_out: 2,
        }
    }
}

impl ModelConfig {
    /// Structural requirements: anything violating these cannot even be
    /// laid out. Depth 0 is structurally fine (identity trunk).
    fn check_structure(&self) -> Result<()> {
        for (what, dim, heads) in [
            ("encoder", self.embed_dim, self.enc_heads),
            ("decoder", self.dec_dim, self.dec_heads),
        ] {
            if heads == 0 {
                return Err(Error::Config(format!("{what} head count must be positive")));
            }
            if dim == 0 || dim % heads != 0 {
                return Err(Error::Config(format!(
                    "{what} dim {dim} must be a positive multiple of its {heads} heads"
                )));
            }
            if dim < 6 || dim % 2 != 0 {
                return Err(Error::Config(format!(
                    "{what} dim {dim} must be even and at least 6 for positional encoding"
                )));
            }
        }
        if self.raw_len == 0 || self.spatial_out == 0 {
            return Err(Error::Config("embedding and spatial head widths must be positive".into()));
        }
        if self.motion_enabled && self.motion_out < 2 {
            return Err(Error::Config("motion head width must be at least 2".into()));
        }
        Ok(())
    }

    /// Full config contract for training runs: structure plus positive
    /// depths (the identity encoder is reachable through the API for
    /// analysis but is not a trainable configuration).
    pub fn validate(&self) -> Result<()> {
        self.check_structure()?;
        if self.enc_depth == 0 || self.dec_depth == 0 {
            return Err(Error::Config("encoder and decoder depths must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter-arena indices of one decoder body: the projection from
/// encoder width, the learned mask token, and the transformer trunk.
#[derive(Debug, Clone)]
pub struct DecoderBody {
    pub input_w: usize,
    pub input_b: usize,
    pub mask_token: usize,
    pub trunk: TrunkParams,
}

#[derive(Debug, Clone)]
pub enum DecoderLayout {
    Separate {
        spatial: DecoderBody,
        spatial_head: (usize, usize),
        motion: Option<(DecoderBody, (usize, usize))>,
    },
    Joint {
        body: DecoderBody,
        spatial_head: (usize, usize),
        motion_head: Option<(usize, usize)>,
    },
}

#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub embed_w: usize,
    pub embed_b: usize,
    pub encoder: TrunkParams,
    pub decoders: DecoderLayout,
}

fn push_block<F: Real>(p: &mut Params<F>, prefix: &str, dim: usize) -> BlockParams {
    let hidden = 4 * dim;
    let zeros = |n: usize| vec![F::zero(); n];
    let ones = |n: usize| vec![F::one(); n];
    BlockParams {
        ln1_w: p.push(&format!("{prefix}.ln1.weight"), &[dim], true, ones(dim)),
        ln1_b: p.push(&format!("{prefix}.ln1.bias"), &[dim], true, zeros(dim)),
        qkv_w: p.push(&format!("{prefix}.attn.qkv.weight"), &[3 * dim, dim], false, zeros(3 * dim * dim)),
        qkv_b: p.push(&format!("{prefix}.attn.qkv.bias"), &[3 * dim], true, zeros(3 * dim)),
        proj_w: p.push(&format!("{prefix}.attn.proj.weight"), &[dim, dim], false, zeros(dim * dim)),
        proj_b: p.push(&format!("{prefix}.attn.proj.bias"), &[dim], true, zeros(dim)),
        ln2_w: p.push(&format!("{prefix}.ln2.weight"), &[dim], true, ones(dim)),
        ln2_b: p.push(&format!("{prefix}.ln2.bias"), &[dim], true, zeros(dim)),
        fc1_w: p.push(&format!("{prefix}.mlp.fc1.weight"), &[hidden, dim], false, zeros(hidden * dim)),
        fc1_b: p.push(&format!("{prefix}.mlp.fc1.bias"), &[hidden], true, zeros(hidden)),
        fc2_w: p.push(&format!("{prefix}.mlp.fc2.weight"), &[dim, hidden], false, zeros(dim * hidden)),
        fc2_b: p.push(&format!("{prefix}.mlp.fc2.bias"), &[dim], true, zeros(dim)),
    }
}

fn push_trunk<F: Real>(
    p: &mut Params<F>,
    prefix: &str,
    dim: usize,
    depth: usize,
    heads: usize,
) -> TrunkParams {
    let blocks: Vec<BlockParams> =
        (0..depth).map(|l| push_block(p, &format!("{prefix}.{l}"), dim)).collect();
    let norm = (depth > 0).then(|| {
        (
            p.push(&format!("{prefix}.norm.weight"), &[dim], true, vec![F::one(); dim]),
            p.push(&format!("{prefix}.norm.bias"), &[dim], true, vec![F::zero(); dim]),
        )
    });
    TrunkParams { blocks, norm, heads }
}

fn push_body<F: Real>(p: &mut Params<F>, prefix: &str, cfg: &ModelConfig) -> DecoderBody {
    let dd = cfg.dec_dim;
    DecoderBody {
        input_w: p.push(
            &format!("{prefix}.input.weight"),
            &[dd, cfg.embed_dim],
            false,
            vec![F::zero(); dd * cfg.embed_dim],
        ),
        input_b: p.push(&format!("{prefix}.input.bias"), &[dd], true, vec![F::zero(); dd]),
        mask_token: p.push(&format!("{prefix}.mask_token"), &[dd], true, vec![F::zero(); dd]),
        trunk: push_trunk(p, prefix, dd, cfg.dec_depth, cfg.dec_heads),
    }
}

fn push_head<F: Real>(p: &mut Params<F>, name: &str, out: usize, dd: usize) -> (usize, usize) {
    (
        p.push(&format!("{name}.weight"), &[out, dd], false, vec![F::zero(); out * dd]),
        p.push(&format!("{name}.bias"), &[out], true, vec![F::zero(); out]),
    )
}

/// Registers every tensor in a fixed order. Freshly registered values are
/// the load/init baseline: LayerNorm scales one, everything else zero.
fn register<F: Real>(cfg: &ModelConfig) -> (Params<F>, ModelLayout) {
    let mut p = Params::new();
    let embed_w = p.push(
        "embed.weight",
        &[cfg.embed_dim, cfg.raw_len],
        false,
        vec![F::zero(); cfg.embed_dim * cfg.raw_len],
    );
    let embed_b =
        p.push("embed.bias", &[cfg.embed_dim], true, vec![F::zero(); cfg.embed_dim]);
    let encoder = push_trunk(&mut p, "enc", cfg.embed_dim, cfg.enc_depth, cfg.enc_heads);
    let decoders = match cfg.decoder_mode {
        DecoderMode::Separate => {
            let spatial = push_body(&mut p, "dec.spatial", cfg);
            let spatial_head = push_head(&mut p, "dec.spatial.head", cfg.spatial_out, cfg.dec_dim);
            let motion = cfg.motion_enabled.then(|| {
                let body = push_body(&mut p, "dec.motion", cfg);
                let head = push_head(&mut p, "dec.motion.head", cfg.motion_out, cfg.dec_dim);
                (body, head)
            });
            DecoderLayout::Separate { spatial, spatial_head, motion }
        }
        DecoderMode::Joint => {
            let body = push_body(&mut p, "dec.joint", cfg);
            let spatial_head =
                push_head(&mut p, "dec.joint.spatial_head", cfg.spatial_out, cfg.dec_dim);
            let motion_head = cfg
                .motion_enabled
                .then(|| push_head(&mut p, "dec.joint.motion_head", cfg.motion_out, cfg.dec_dim));
            DecoderLayout::Joint { body, spatial_head, motion_head }
        }
    };
    (p, ModelLayout { embed_w, embed_b, encoder, decoders })
}

fn truncated_normal(rng: &mut impl Rng, out: &mut [f32]) {
    for v in out {
        *v = loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break (z * INIT_SIGMA) as f32;
            }
        };
    }
}

/// Forward record of the visible-token embedding.
pub struct EmbedTrace<F> {
    /// Gathered tubelet rows, one per visible token, clip-major.
    raw_rows: Array2<F>,
}

/// Forward record of one decoder body run plus its head input.
pub struct BodyTrace<F> {
    z: Array2<F>,
    trunk: TrunkCache<F>,
    trunk_out: Array2<F>,
    batch: usize,
    visible: Vec<Vec<usize>>,
    masked: Vec<Vec<usize>>,
}

pub struct DecodeTrace<F> {
    pub head: DecoderHead,
    body: BodyTrace<F>,
}

pub enum DecodeAllTrace<F> {
    Separate { spatial: BodyTrace<F>, motion: Option<BodyTrace<F>> },
    Joint { body: BodyTrace<F> },
}

pub struct DecodeAllOut<F> {
    pub spatial: Array2<F>,
    pub motion: Option<Array2<F>>,
    pub trace: DecodeAllTrace<F>,
}

pub struct VideoModel {
    cfg: ModelConfig,
    grid: TokenGrid,
    layout: ModelLayout,
    enc_pe: Array2<f64>,
    dec_pe: Array2<f64>,
}

impl VideoModel {
    pub fn new(cfg: ModelConfig, grid: TokenGrid) -> Result<Self> {
        cfg.check_structure()?;
        let enc_pe = tokenizer::positional_embedding::<f64>(&grid, cfg.embed_dim)?;
        let dec_pe = tokenizer::positional_embedding::<f64>(&grid, cfg.dec_dim)?;
        let (_, layout) = register::<f32>(&cfg);
        Ok(VideoModel { cfg, grid, layout, enc_pe, dec_pe })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &TokenGrid {
        &self.grid
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    /// Fresh arena with registration-default values; used as the landing
    /// zone for checkpoint loads.
    pub fn zeroed_params<F: Real>(&self) -> Params<F> {
        register::<F>(&self.cfg).0
    }

    /// Truncated-normal initialization (sigma 0.02, resampled beyond two
    /// sigma). Each component draws from its own named stream so adding
    /// or removing one decoder never shifts another component's values.
    pub fn init_params(&self, seed: u64) -> Params<f32> {
        let (mut p, layout) = register::<f32>(&self.cfg);
        let fill_trunk = |p: &mut Params<f32>, rng: &mut rand_chacha::ChaCha8Rng, t: &TrunkParams| {
            for b in &t.blocks {
                for idx in [b.qkv_w, b.proj_w, b.fc1_w, b.fc2_w] {
                    truncated_normal(rng, p.data_mut(idx));
                }
            }
        };
        let fill_body = |p: &mut Params<f32>, rng: &mut rand_chacha::ChaCha8Rng, b: &DecoderBody| {
            truncated_normal(rng, p.data_mut(b.input_w));
            truncated_normal(rng, p.data_mut(b.mask_token));
            fill_trunk(p, rng, &b.trunk);
        };

        let mut enc_rng = rng::stream(seed, "model.init.encoder", 0);
        truncated_normal(&mut enc_rng, p.data_mut(layout.embed_w));
        fill_trunk(&mut p, &mut enc_rng, &layout.encoder);

        match &layout.decoders {
            DecoderLayout::Separate { spatial, spatial_head, motion } => {
                let mut rng = rng::stream(seed, "model.init.dec.spatial", 0);
                fill_body(&mut p, &mut rng, spatial);
                truncated_normal(&mut rng, p.data_mut(spatial_head.0));
                if let Some((body, head)) = motion {
                    let mut rng = rng::stream(seed, "model.init.dec.motion", 0);
                    fill_body(&mut p, &mut rng, body);
                    truncated_normal(&mut rng, p.data_mut(head.0));
                }
            }
            DecoderLayout::Joint { body, spatial_head, motion_head } => {
                let mut rng = rng::stream(seed, "model.init.dec.joint", 0);
                fill_body(&mut p, &mut rng, body);
                truncated_normal(&mut rng, p.data_mut(spatial_head.0));
                if let Some(head) = motion_head {
                    truncated_normal(&mut rng, p.data_mut(head.0));
                }
            }
        }
        p
    }

    fn pe_rows<F: Real>(&self, table: &Array2<f64>) -> Array2<F> {
        table.mapv(F::from_f64)
    }

    fn check_masks(&self, masks: &[MaskMap]) -> Result<usize> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Input("at least one mask map is required".into()))?;
        for m in masks {
            if m.grid != self.grid {
                return Err(Error::Input(format!(
                    "mask grid {}x{}x{} does not match model grid {}x{}x{}",
                    m.grid.slots, m.grid.rows, m.grid.cols, self.grid.slots, self.grid.rows, self.grid.cols
                )));
            }
            if m.visible_tokens.len() != first.visible_tokens.len() {
                return Err(Error::Input(
                    "all mask maps in a batch must expose the same visible count".into(),
                ));
            }
        }
        Ok(first.visible_tokens.len())
    }

    /// Gathers visible tubelet rows and embeds them: affine projection
    /// plus the fixed positional encoding of each token's grid site.
    pub fn embed_visible<F: Real>(
        &self,
        p: &Params<F>,
        raws: &[Array2<F>],
        masks: &[MaskMap],
    ) -> Result<(Array2<F>, EmbedTrace<F>)> {
        if raws.len() != masks.len() {
            return Err(Error::Input(format!(
                "{} clips but {} mask maps",
                raws.len(),
                masks.len()
            )));
        }
        let vis = self.check_masks(masks)?;
        let n = self.grid.tokens();
        for r in raws {
            if r.dim() != (n, self.cfg.raw_len) {
                return Err(Error::Input(format!(
                    "tubelet matrix is {:?}, model expects ({n}, {})",
                    r.dim(),
                    self.cfg.raw_len
                )));
            }
        }
        let mut raw_rows = Array2::<F>::zeros((masks.len() * vis, self.cfg.raw_len));
        for (b, (raw, mask)) in raws.iter().zip(masks).enumerate() {
            for (i, &tok) in mask.visible_tokens.iter().enumerate() {
                raw_rows.row_mut(b * vis + i).assign(&raw.row(tok));
            }
        }
        let mut x = layers::linear_fwd(p, self.layout.embed_w, self.layout.embed_b, &raw_rows.view());
        let pe = self.pe_rows::<F>(&self.enc_pe);
        for (b, mask) in masks.iter().enumerate() {
            for (i, &tok) in mask.visible_tokens.iter().enumerate() {
                let mut row = x.row_mut(b * vis + i);
                for (v, &pv) in row.iter_mut().zip(pe.row(tok).iter()) {
                    *v = *v + pv;
                }
            }
        }
        Ok((x, EmbedTrace { raw_rows }))
    }

    /// Embeds every token of every clip (probe path, no masking).
    pub fn embed_all<F: Real>(&self, p: &Params<F>, raws: &[Array2<F>]) -> Result<Array2<F>> {
        self.embed_all_traced(p, raws).map(|(x, _)| x)
    }

    /// [`Self::embed_all`] keeping the trace needed to run
    /// [`Self::embed_backward`] (end-to-end evaluation training).
    pub fn embed_all_traced<F: Real>(
        &self,
        p: &Params<F>,
        raws: &[Array2<F>],
    ) -> Result<(Array2<F>, EmbedTrace<F>)> {
        let n = self.grid.tokens();
        for r in raws {
            if r.dim() != (n, self.cfg.raw_len) {
                return Err(Error::Input(format!(
                    "tubelet matrix is {:?}, model expects ({n}, {})",
                    r.dim(),
                    self.cfg.raw_len
                )));
            }
        }
        let mut raw_rows = Array2::<F>::zeros((raws.len() * n, self.cfg.raw_len));
        for (b, raw) in raws.iter().enumerate() {
            raw_rows.slice_mut(ndarray::s![b * n..(b + 1) * n, ..]).assign(raw);
        }
        let mut x = layers::linear_fwd(p, self.layout.embed_w, self.layout.embed_b, &raw_rows.view());
        let pe = self.pe_rows::<F>(&self.enc_pe);
        for b in 0..raws.len() {
            for t in 0..n {
                let mut row = x.row_mut(b * n + t);
                for (v, &pv) in row.iter_mut().zip(pe.row(t).iter()) {
                    *v = *v + pv;
                }
            }
        }
        Ok((x, EmbedTrace { raw_rows }))
    }

    pub fn embed_backward<F: Real>(
        &self,
        p: &Params<F>,
        trace: &EmbedTrace<F>,
        dx: &Array2<F>,
        g: &mut GradStore<F>,
    ) {
        layers::linear_bwd(
            p,
            self.layout.embed_w,
            self.layout.embed_b,
            &trace.raw_rows.view(),
            &dx.view(),
            g,
        );
    }

    /// Runs the encoder trunk over embedded tokens. `batch` clips, each
    /// contributing rows/batch consecutive rows. Depth 0 is an identity.
    pub fn encode<F: Real>(
        &self,
        p: &Params<F>,
        x: Array2<F>,
        batch: usize,
    ) -> Result<(Array2<F>, TrunkCache<F>)> {
        if batch == 0 || x.nrows() % batch != 0 {
            return Err(Error::Input(format!(
                "encoder input rows {} not divisible into {batch} clips",
                x.nrows()
            )));
        }
        layers::trunk_fwd(p, &self.layout.encoder, x, batch, "encoder")
    }

    pub fn encode_backward<F: Real>(
        &self,
        p: &Params<F>,
        cache: &TrunkCache<F>,
        dz: Array2<F>,
        batch: usize,
        g: &mut GradStore<F>,
    ) -> Array2<F> {
        layers::trunk_bwd(p, &self.layout.encoder, cache, dz, batch, g)
    }

    fn body_and_head(&self, head: DecoderHead) -> Result<(&DecoderBody, (usize, usize), &'static str)> {
        match (&self.layout.decoders, head) {
            (DecoderLayout::Separate { spatial, spatial_head, .. }, DecoderHead::Spatial) => {
                Ok((spatial, *spatial_head, "spatial decoder"))
            }
            (DecoderLayout::Separate { motion, .. }, DecoderHead::Motion) => match motion {
                Some((body, head)) => Ok((body, *head, "motion decoder")),
                None => Err(Error::Config("model was built without a motion decoder".into())),
            },
            (DecoderLayout::Joint { body, spatial_head, .. }, DecoderHead::Spatial) => {
                Ok((body, *spatial_head, "joint decoder"))
            }
            (DecoderLayout::Joint { body, motion_head, .. }, DecoderHead::Motion) => {
                match motion_head {
                    Some(h) => Ok((body, *h, "joint decoder")),
                    None => Err(Error::Config("model was built without a motion head".into())),
                }
            }
        }
    }

    /// Projects Z to decoder width, scatters it into visible slots with
    /// the mask token in masked slots, re-adds positional encodings, and
    /// runs the decoder trunk. Returns the head input for all N slots.
    fn run_body<F: Real>(
        &self,
        p: &Params<F>,
        body: &DecoderBody,
        z: &Array2<F>,
        masks: &[MaskMap],
        label: &str,
    ) -> Result<BodyTrace<F>> {
        let vis = self.check_masks(masks)?;
        let batch = masks.len();
        if z.dim() != (batch * vis, self.cfg.embed_dim) {
            return Err(Error::Input(format!(
                "latent matrix is {:?} but the mask maps call for ({}, {})",
                z.dim(),
                batch * vis,
                self.cfg.embed_dim
            )));
        }
        let n = self.grid.tokens();
        let dd = self.cfg.dec_dim;
        let zin = layers::linear_fwd(p, body.input_w, body.input_b, &z.view());
        let mask_tok = p.data(body.mask_token);
        let pe = self.pe_rows::<F>(&self.dec_pe);
        let mut full = Array2::<F>::zeros((batch * n, dd));
        {
            // The visible/masked partition covers every slot, so each
            // row is written exactly once: source plus its positional
            // row in a single pass.
            let fs = full.as_slice_mut().expect("fresh array");
            let zs = zin.as_slice().expect("projection output is standard layout");
            let pes = pe.as_slice().expect("positional rows are standard layout");
            for (b, mask) in masks.iter().enumerate() {
                for (i, &tok) in mask.visible_tokens.iter().enumerate() {
                    let dst = &mut fs[(b * n + tok) * dd..(b * n + tok + 1) * dd];
                    let src = &zs[(b * vis + i) * dd..(b * vis + i + 1) * dd];
                    let per = &pes[tok * dd..(tok + 1) * dd];
                    for ((o, &s), &q) in dst.iter_mut().zip(src).zip(per) {
                        *o = s + q;
                    }
                }
                for &tok in &mask.masked_tokens {
                    let dst = &mut fs[(b * n + tok) * dd..(b * n + tok + 1) * dd];
                    let per = &pes[tok * dd..(tok + 1) * dd];
                    for ((o, &m), &q) in dst.iter_mut().zip(mask_tok).zip(per) {
                        *o = m + q;
                    }
                }
            }
        }
        let (trunk_out, trunk) = layers::trunk_fwd(p, &body.trunk, full, batch, label)?;
        Ok(BodyTrace {
            z: z.clone(),
            trunk,
            trunk_out,
            batch,
            visible: masks.iter().map(|m| m.visible_tokens.clone()).collect(),
            masked: masks.iter().map(|m| m.masked_tokens.clone()).collect(),
        })
    }

    /// Backward through one decoder body given the gradient at the head
    /// input; accumulates body parameter gradients and returns dZ.
    fn body_backward<F: Real>(
        &self,
        p: &Params<F>,
        body: &DecoderBody,
        trace: &BodyTrace<F>,
        dtrunk_out: Array2<F>,
        g: &mut GradStore<F>,
    ) -> Array2<F> {
        let n = self.grid.tokens();
        let dd = self.cfg.dec_dim;
        let dfull = layers::trunk_bwd(p, &body.trunk, &trace.trunk, dtrunk_out, trace.batch, g);
        let vis = trace.visible.first().map_or(0, |v| v.len());
        let mut dzin = Array2::<F>::zeros((trace.batch * vis, dd));
        {
            let ds = dzin.as_slice_mut().expect("fresh array");
            let dfs = dfull.as_slice().expect("trunk gradient is standard layout");
            for (b, visible) in trace.visible.iter().enumerate() {
                for (i, &tok) in visible.iter().enumerate() {
                    ds[(b * vis + i) * dd..(b * vis + i + 1) * dd]
                        .copy_from_slice(&dfs[(b * n + tok) * dd..(b * n + tok + 1) * dd]);
                }
            }
            let dmask = g.data_mut(body.mask_token);
            for (b, masked) in trace.masked.iter().enumerate() {
                for &tok in masked {
                    let row = &dfs[(b * n + tok) * dd..(b * n + tok + 1) * dd];
                    for (acc, &v) in dmask.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
            }
        }
        layers::linear_bwd(p, body.input_w, body.input_b, &trace.z.view(), &dzin.view(), g)
    }

    /// Decodes one head: predictions for all N slots of every clip, in
    /// grid order.
    pub fn decode<F: Real>(
        &self,
        p: &Params<F>,
        z: &Array2<F>,
        masks: &[MaskMap],
        head: DecoderHead,
    ) -> Result<(Array2<F>, DecodeTrace<F>)> {
        let (body, (hw, hb), label) = self.body_and_head(head)?;
        let trace = self.run_body(p, body, z, masks, label)?;
        let out = layers::linear_fwd(p, hw, hb, &trace.trunk_out.view());
        Ok((out, DecodeTrace { head, body: trace }))
    }

    pub fn decode_backward<F: Real>(
        &self,
        p: &Params<F>,
        trace: &DecodeTrace<F>,
        dout: &Array2<F>,
        g: &mut GradStore<F>,
    ) -> Result<Array2<F>> {
        let (body, (hw, hb), _) = self.body_and_head(trace.head)?;
        let dtrunk_out =
            layers::linear_bwd(p, hw, hb, &trace.body.trunk_out.view(), &dout.view(), g);
        Ok(self.body_backward(p, body, &trace.body, dtrunk_out, g))
    }

    /// Training-path decode: spatial head always, motion head on demand.
    /// Joint mode runs the shared trunk once.
    pub fn decode_all<F: Real>(
        &self,
        p: &Params<F>,
        z: &Array2<F>,
        masks: &[MaskMap],
        want_motion: bool,
    ) -> Result<DecodeAllOut<F>> {
        match &self.layout.decoders {
            DecoderLayout::Separate { spatial, spatial_head, motion } => {
                let strace = self.run_body(p, spatial, z, masks, "spatial decoder")?;
                let sout = layers::linear_fwd(p, spatial_head.0, spatial_head.1, &strace.trunk_out.view());
                let (mout, mtrace) = if want_motion {
                    let (body, head) = motion.as_ref().ok_or_else(|| {
                        Error::Config("model was built without a motion decoder".into())
                    })?;
                    let t = self.run_body(p, body, z, masks, "motion decoder")?;
                    let out = layers::linear_fwd(p, head.0, head.1, &t.trunk_out.view());
                    (Some(out), Some(t))
                } else {
                    (None, None)
                };
                Ok(DecodeAllOut {
                    spatial: sout,
                    motion: mout,
                    trace: DecodeAllTrace::Separate { spatial: strace, motion: mtrace },
                })
            }
            DecoderLayout::Joint { body, spatial_head, motion_head } => {
                let trace = self.run_body(p, body, z, masks, "joint decoder")?;
                let sout = layers::linear_fwd(p, spatial_head.0, spatial_head.1, &trace.trunk_out.view());
                let mout = if want_motion {
                    let head = motion_head.ok_or_else(|| {
                        Error::Config("model was built without a motion head".into())
                    })?;
                    Some(layers::linear_fwd(p, head.0, head.1, &trace.trunk_out.view()))
                } else {
                    None
                };
                Ok(DecodeAllOut { spatial: sout, motion: mout, trace: DecodeAllTrace::Joint { body: trace } })
            }
        }
    }

    /// Backward counterpart of [`decode_all`]. `dmotion: None` skips the
    /// motion branch entirely, leaving its parameter gradients untouched.
    pub fn decode_all_backward<F: Real>(
        &self,
        p: &Params<F>,
        trace: &DecodeAllTrace<F>,
        dspatial: &Array2<F>,
        dmotion: Option<&Array2<F>>,
        g: &mut GradStore<F>,
    ) -> Result<Array2<F>> {
        match (&self.layout.decoders, trace) {
            (
                DecoderLayout::Separate { spatial, spatial_head, motion },
                DecodeAllTrace::Separate { spatial: strace, motion: mtrace },
            ) => {
                let ds = layers::linear_bwd(
                    p,
                    spatial_head.0,
                    spatial_head.1,
                    &strace.trunk_out.view(),
                    &dspatial.view(),
                    g,
                );
                let mut dz = self.body_backward(p, spatial, strace, ds, g);
                if let (Some(dm), Some(mt)) = (dmotion, mtrace) {
                    let (body, head) = motion.as_ref().ok_or_else(|| {
                        Error::Config("model was built without a motion decoder".into())
                    })?;
                    let dmo = layers::linear_bwd(p, head.0, head.1, &mt.trunk_out.view(), &dm.view(), g);
                    let dz_m = self.body_backward(p, body, mt, dmo, g);
                    dz = dz + &dz_m;
                }
                Ok(dz)
            }
            (
                DecoderLayout::Joint { body, spatial_head, motion_head },
                DecodeAllTrace::Joint { body: trace },
            ) => {
                let mut dtrunk = layers::linear_bwd(
                    p,
                    spatial_head.0,
                    spatial_head.1,
                    &trace.trunk_out.view(),
                    &dspatial.view(),
                    g,
                );
                if let Some(dm) = dmotion {
                    let head = motion_head.ok_or_else(|| {
                        Error::Config("model was built without a motion head".into())
                    })?;
                    let dt = layers::linear_bwd(p, head.0, head.1, &trace.trunk_out.view(), &dm.view(), g);
                    dtrunk = dtrunk + &dt;
                }
                Ok(self.body_backward(p, body, trace, dtrunk, g))
            }
            _ => Err(Error::Input("decode trace does not match the model's decoder mode".into())),
        }
    }
}
