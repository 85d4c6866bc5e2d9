//! The model: a small ViT encoder over visible patch tokens, a lightweight
//! ViT decoder that fills masked positions with a shared learnable mask
//! token and predicts raw pixels per patch, and a 3-layer MLP head that
//! classifies mean-pooled encoder embeddings.
//!
//! Positional tables are fixed 2-D sinusoids recomputed from the config;
//! they are never trained and never serialized.

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::masking::{patch_space_mask, visible_indices, MaskSet};
use crate::rng::{hash_bytes, Rng};
use crate::tensor::{NodeId, Tape, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-6;
const INIT_SIGMA: f64 = 0.02;
const INIT_CUTOFF: f64 = 0.04;

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            encoder_depth: 4,
            decoder_depth: 2,
            num_heads: 4,
            mlp_ratio: 4,
            decoder_dim: 32,
        }
    }
}

impl ViTConfig {
    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count T.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Error::ShapeMismatch {
            op: "vit_config",
            detail,
        };
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 || self.decoder_dim % self.num_heads != 0 {
            return Err(fail(format!(
                "dims ({}, {}) not divisible by num_heads {}",
                self.embed_dim, self.decoder_dim, self.num_heads
            )));
        }
        if self.embed_dim % 4 != 0 || self.decoder_dim % 4 != 0 {
            return Err(fail(
                "embed_dim and decoder_dim must be multiples of 4 for the 2-D sinusoidal table"
                    .into(),
            ));
        }
        if self.encoder_depth == 0 || self.mlp_ratio == 0 {
            return Err(fail("encoder_depth and mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed 2-D sin/cos positional table for a square grid: half the channels
/// encode the row coordinate, half the column, each as interleaved
/// sin/cos pairs over a geometric frequency ladder.
pub fn sincos_pos_2d(grid: usize, dim: usize) -> Tensor {
    assert_eq!(dim % 4, 0, "positional dim must be a multiple of 4");
    let quarter = dim / 4;
    let mut data = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            for (coord, _) in [(gy, 0), (gx, 1)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    let angle = coord as f64 * omega;
                    data.push(angle.sin());
                    data.push(angle.cos());
                }
            }
        }
    }
    Tensor::from_vec(vec![grid * grid, dim], data)
}

// ── parameter containers ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp_in_w: Tensor,
    pub mlp_in_b: Tensor,
    pub mlp_out_w: Tensor,
    pub mlp_out_b: Tensor,
}

impl BlockParams {
    fn init(dim: usize, mlp_ratio: usize, rng: &mut Rng) -> Self {
        let hidden = dim * mlp_ratio;
        BlockParams {
            ln1_gamma: Tensor::full(vec![1, dim], 1.0),
            ln1_beta: Tensor::zeros(vec![1, dim]),
            wq: trunc_normal_tensor(vec![dim, dim], rng),
            bq: Tensor::zeros(vec![1, dim]),
            wk: trunc_normal_tensor(vec![dim, dim], rng),
            bk: Tensor::zeros(vec![1, dim]),
            wv: trunc_normal_tensor(vec![dim, dim], rng),
            bv: Tensor::zeros(vec![1, dim]),
            wo: trunc_normal_tensor(vec![dim, dim], rng),
            bo: Tensor::zeros(vec![1, dim]),
            ln2_gamma: Tensor::full(vec![1, dim], 1.0),
            ln2_beta: Tensor::zeros(vec![1, dim]),
            mlp_in_w: trunc_normal_tensor(vec![dim, hidden], rng),
            mlp_in_b: Tensor::zeros(vec![1, hidden]),
            mlp_out_w: trunc_normal_tensor(vec![hidden, dim], rng),
            mlp_out_b: Tensor::zeros(vec![1, dim]),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        let fields: [(&str, &Tensor); 16] = [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("mlp_in_w", &self.mlp_in_w),
            ("mlp_in_b", &self.mlp_in_b),
            ("mlp_out_w", &self.mlp_out_w),
            ("mlp_out_b", &self.mlp_out_b),
        ];
        for (name, t) in fields {
            out.push((format!("{prefix}.{name}"), t));
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.mlp_in_w,
            &mut self.mlp_in_b,
            &mut self.mlp_out_w,
            &mut self.mlp_out_b,
        ]
    }
}

fn trunc_normal_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.trunc_normal(INIT_SIGMA, INIT_CUTOFF)).collect(),
    )
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    /// Fixed sinusoidal table, never trained, never serialized.
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

impl EncoderParams {
    pub fn init(cfg: &ViTConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        EncoderParams {
            patch_weight: trunc_normal_tensor(vec![cfg.patch_dim(), d], rng),
            patch_bias: Tensor::zeros(vec![1, d]),
            pos: sincos_pos_2d(cfg.grid(), d),
            blocks: (0..cfg.encoder_depth)
                .map(|_| BlockParams::init(d, cfg.mlp_ratio, rng))
                .collect(),
            final_gamma: Tensor::full(vec![1, d], 1.0),
            final_beta: Tensor::zeros(vec![1, d]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("encoder.patch_weight".into(), &self.patch_weight));
        out.push(("encoder.patch_bias".into(), &self.patch_bias));
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("encoder.block{i}"), &mut out);
        }
        out.push(("encoder.final_gamma".into(), &self.final_gamma));
        out.push(("encoder.final_beta".into(), &self.final_beta));
        out
    }

    /// Same order as [`EncoderParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.patch_weight, &mut self.patch_bias];
        for b in self.blocks.iter_mut() {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub bridge_weight: Tensor,
    pub bridge_bias: Tensor,
    /// Shared learnable vector standing in for every masked position.
    pub mask_token: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
    pub pixel_weight: Tensor,
    pub pixel_bias: Tensor,
}

impl DecoderParams {
    pub fn init(cfg: &ViTConfig, rng: &mut Rng) -> Self {
        let dd = cfg.decoder_dim;
        DecoderParams {
            bridge_weight: trunc_normal_tensor(vec![cfg.embed_dim, dd], rng),
            bridge_bias: Tensor::zeros(vec![1, dd]),
            mask_token: trunc_normal_tensor(vec![1, dd], rng),
            pos: sincos_pos_2d(cfg.grid(), dd),
            blocks: (0..cfg.decoder_depth)
                .map(|_| BlockParams::init(dd, cfg.mlp_ratio, rng))
                .collect(),
            final_gamma: Tensor::full(vec![1, dd], 1.0),
            final_beta: Tensor::zeros(vec![1, dd]),
            pixel_weight: trunc_normal_tensor(vec![dd, cfg.patch_dim()], rng),
            pixel_bias: Tensor::zeros(vec![1, cfg.patch_dim()]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("decoder.bridge_weight".into(), &self.bridge_weight));
        out.push(("decoder.bridge_bias".into(), &self.bridge_bias));
        out.push(("decoder.mask_token".into(), &self.mask_token));
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("decoder.block{i}"), &mut out);
        }
        out.push(("decoder.final_gamma".into(), &self.final_gamma));
        out.push(("decoder.final_beta".into(), &self.final_beta));
        out.push(("decoder.pixel_weight".into(), &self.pixel_weight));
        out.push(("decoder.pixel_bias".into(), &self.pixel_bias));
        out
    }

    /// Same order as [`DecoderParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.bridge_weight,
            &mut self.bridge_bias,
            &mut self.mask_token,
        ];
        for b in self.blocks.iter_mut() {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out.push(&mut self.pixel_weight);
        out.push(&mut self.pixel_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Three linear layers (d -> d -> d -> 2) with GELU between. The final
/// layer is zero-initialized so an untrained head emits logits [0, 0]
/// (uniform probabilities, cross-entropy exactly ln 2).
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl HeadParams {
    pub fn init(cfg: &ViTConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        HeadParams {
            w1: trunc_normal_tensor(vec![d, d], rng),
            b1: Tensor::zeros(vec![1, d]),
            w2: trunc_normal_tensor(vec![d, d], rng),
            b2: Tensor::zeros(vec![1, d]),
            w3: Tensor::zeros(vec![d, 2]),
            b3: Tensor::zeros(vec![1, 2]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("head.w1".into(), &self.w1),
            ("head.b1".into(), &self.b1),
            ("head.w2".into(), &self.w2),
            ("head.b2".into(), &self.b2),
            ("head.w3".into(), &self.w3),
            ("head.b3".into(), &self.b3),
        ]
    }

    /// Same order as [`HeadParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// FNV digest over parameter bytes in named order; used by the freeze and
/// reset contract checks.
pub fn params_digest(named: &[(String, &Tensor)]) -> u64 {
    let mut bytes = Vec::new();
    for (name, t) in named {
        bytes.extend_from_slice(name.as_bytes());
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    hash_bytes(&bytes)
}

// ── tape bindings ──────────────────────────────────────────────────────

pub struct BoundBlock {
    ln1_gamma: NodeId,
    ln1_beta: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2_gamma: NodeId,
    ln2_beta: NodeId,
    mlp_in_w: NodeId,
    mlp_in_b: NodeId,
    mlp_out_w: NodeId,
    mlp_out_b: NodeId,
}

/// Bind a tensor as a trainable param or a frozen constant. Freezing is
/// structural: constants never receive gradient buffers.
fn leaf(tape: &mut Tape, t: &Tensor, trainable: bool) -> NodeId {
    if trainable {
        tape.param(t)
    } else {
        tape.constant(t.clone())
    }
}

impl BoundBlock {
    fn bind(tape: &mut Tape, p: &BlockParams, trainable: bool) -> Self {
        BoundBlock {
            ln1_gamma: leaf(tape, &p.ln1_gamma, trainable),
            ln1_beta: leaf(tape, &p.ln1_beta, trainable),
            wq: leaf(tape, &p.wq, trainable),
            bq: leaf(tape, &p.bq, trainable),
            wk: leaf(tape, &p.wk, trainable),
            bk: leaf(tape, &p.bk, trainable),
            wv: leaf(tape, &p.wv, trainable),
            bv: leaf(tape, &p.bv, trainable),
            wo: leaf(tape, &p.wo, trainable),
            bo: leaf(tape, &p.bo, trainable),
            ln2_gamma: leaf(tape, &p.ln2_gamma, trainable),
            ln2_beta: leaf(tape, &p.ln2_beta, trainable),
            mlp_in_w: leaf(tape, &p.mlp_in_w, trainable),
            mlp_in_b: leaf(tape, &p.mlp_in_b, trainable),
            mlp_out_w: leaf(tape, &p.mlp_out_w, trainable),
            mlp_out_b: leaf(tape, &p.mlp_out_b, trainable),
        }
    }

    fn ids(&self, out: &mut Vec<NodeId>) {
        out.extend_from_slice(&[
            self.ln1_gamma,
            self.ln1_beta,
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln2_gamma,
            self.ln2_beta,
            self.mlp_in_w,
            self.mlp_in_b,
            self.mlp_out_w,
            self.mlp_out_b,
        ]);
    }
}

pub struct BoundEncoder {
    patch_weight: NodeId,
    patch_bias: NodeId,
    pos: NodeId,
    blocks: Vec<BoundBlock>,
    final_gamma: NodeId,
    final_beta: NodeId,
}

impl BoundEncoder {
    pub fn bind(tape: &mut Tape, p: &EncoderParams, trainable: bool) -> Self {
        let patch_weight = leaf(tape, &p.patch_weight, trainable);
        let patch_bias = leaf(tape, &p.patch_bias, trainable);
        let blocks = p
            .blocks
            .iter()
            .map(|b| BoundBlock::bind(tape, b, trainable))
            .collect();
        let final_gamma = leaf(tape, &p.final_gamma, trainable);
        let final_beta = leaf(tape, &p.final_beta, trainable);
        let pos = tape.constant(p.pos.clone());
        BoundEncoder {
            patch_weight,
            patch_bias,
            pos,
            blocks,
            final_gamma,
            final_beta,
        }
    }

    /// Trainable node ids, in the same order as
    /// [`EncoderParams::named_tensors`].
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.patch_weight, self.patch_bias];
        for b in &self.blocks {
            b.ids(&mut out);
        }
        out.push(self.final_gamma);
        out.push(self.final_beta);
        out
    }
}

pub struct BoundDecoder {
    bridge_weight: NodeId,
    bridge_bias: NodeId,
    mask_token: NodeId,
    pos: NodeId,
    blocks: Vec<BoundBlock>,
    final_gamma: NodeId,
    final_beta: NodeId,
    pixel_weight: NodeId,
    pixel_bias: NodeId,
}

impl BoundDecoder {
    pub fn bind(tape: &mut Tape, p: &DecoderParams, trainable: bool) -> Self {
        let bridge_weight = leaf(tape, &p.bridge_weight, trainable);
        let bridge_bias = leaf(tape, &p.bridge_bias, trainable);
        let mask_token = leaf(tape, &p.mask_token, trainable);
        let blocks = p
            .blocks
            .iter()
            .map(|b| BoundBlock::bind(tape, b, trainable))
            .collect();
        let final_gamma = leaf(tape, &p.final_gamma, trainable);
        let final_beta = leaf(tape, &p.final_beta, trainable);
        let pixel_weight = leaf(tape, &p.pixel_weight, trainable);
        let pixel_bias = leaf(tape, &p.pixel_bias, trainable);
        let pos = tape.constant(p.pos.clone());
        BoundDecoder {
            bridge_weight,
            bridge_bias,
            mask_token,
            pos,
            blocks,
            final_gamma,
            final_beta,
            pixel_weight,
            pixel_bias,
        }
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.bridge_weight, self.bridge_bias, self.mask_token];
        for b in &self.blocks {
            b.ids(&mut out);
        }
        out.push(self.final_gamma);
        out.push(self.final_beta);
        out.push(self.pixel_weight);
        out.push(self.pixel_bias);
        out
    }
}

pub struct BoundHead {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    w3: NodeId,
    b3: NodeId,
}

impl BoundHead {
    pub fn bind(tape: &mut Tape, p: &HeadParams, trainable: bool) -> Self {
        BoundHead {
            w1: leaf(tape, &p.w1, trainable),
            b1: leaf(tape, &p.b1, trainable),
            w2: leaf(tape, &p.w2, trainable),
            b2: leaf(tape, &p.b2, trainable),
            w3: leaf(tape, &p.w3, trainable),
            b3: leaf(tape, &p.b3, trainable),
        }
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        vec![self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

// ── patch layout ───────────────────────────────────────────────────────

/// Split an image into T rows of p^2 pixels; row t holds patch t's pixels
/// in row-major raster order within the patch.
pub fn patchify(img: &GrayImage, patch: usize) -> Result<Tensor> {
    if img.width % patch != 0 || img.height % patch != 0 {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            detail: format!("{}x{} image, patch {patch}", img.width, img.height),
        });
    }
    let (gw, gh) = (img.width / patch, img.height / patch);
    let mut data = Vec::with_capacity(img.pixels.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..patch {
                let row = (gy * patch + dy) * img.width + gx * patch;
                data.extend_from_slice(&img.pixels[row..row + patch]);
            }
        }
    }
    Ok(Tensor::from_vec(vec![gw * gh, patch * patch], data))
}

/// Exact inverse of [`patchify`]: patch rows back to row-major pixels.
pub fn unpatchify(patches: &Tensor, patch: usize, width: usize, height: usize) -> Result<Vec<f64>> {
    let (gw, gh) = (width / patch, height / patch);
    if patches.rows() != gw * gh || patches.cols() != patch * patch {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            detail: format!(
                "{:?} patches for {width}x{height} image, patch {patch}",
                patches.shape
            ),
        });
    }
    let mut pixels = vec![0.0; width * height];
    for t in 0..gw * gh {
        let (gy, gx) = (t / gw, t % gw);
        for dy in 0..patch {
            for dx in 0..patch {
                pixels[(gy * patch + dy) * width + gx * patch + dx] =
                    patches.data[t * patch * patch + dy * patch + dx];
            }
        }
    }
    Ok(pixels)
}

// ── forward graphs ─────────────────────────────────────────────────────

fn check_visible(visible: &[usize], tokens: usize) -> Result<()> {
    if visible.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "encode",
            detail: "no visible tokens".into(),
        });
    }
    let mut prev = None;
    for &v in visible {
        if v >= tokens {
            return Err(Error::IndexOutOfRange {
                index: v,
                len: tokens,
            });
        }
        if let Some(p) = prev {
            if v <= p {
                return Err(Error::ShapeMismatch {
                    op: "encode",
                    detail: format!("visible indices not strictly increasing at {v}"),
                });
            }
        }
        prev = Some(v);
    }
    Ok(())
}

fn transformer_block(
    tape: &mut Tape,
    block: &BoundBlock,
    x: NodeId,
    heads: usize,
    attn_trace: &mut Vec<NodeId>,
) -> Result<NodeId> {
    let dim = tape.value(x).cols();
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let normed = tape.layernorm(x, block.ln1_gamma, block.ln1_beta, LAYERNORM_EPS)?;
    let q = tape.matmul(normed, block.wq)?;
    let q = tape.add(q, block.bq)?;
    let k = tape.matmul(normed, block.wk)?;
    let k = tape.add(k, block.bk)?;
    let v = tape.matmul(normed, block.wv)?;
    let v = tape.add(v, block.bv)?;

    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax(scores);
        attn_trace.push(probs);
        contexts.push(tape.matmul(probs, vh)?);
    }
    let ctx = tape.concat_cols(&contexts)?;
    let attn_out = tape.matmul(ctx, block.wo)?;
    let attn_out = tape.add(attn_out, block.bo)?;
    let x = tape.add(x, attn_out)?;

    let normed2 = tape.layernorm(x, block.ln2_gamma, block.ln2_beta, LAYERNORM_EPS)?;
    let hidden = tape.matmul(normed2, block.mlp_in_w)?;
    let hidden = tape.add(hidden, block.mlp_in_b)?;
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, block.mlp_out_w)?;
    let out = tape.add(out, block.mlp_out_b)?;
    tape.add(x, out)
}

/// Encode the visible patches of an image: embed them, add the positional
/// code of their original positions, and run the encoder blocks.
/// Full-sequence mode is `visible = [0..T)`.
pub fn encode_graph(
    tape: &mut Tape,
    enc: &BoundEncoder,
    cfg: &ViTConfig,
    patches: NodeId,
    visible: &[usize],
) -> Result<NodeId> {
    encode_graph_traced(tape, enc, cfg, patches, visible, &mut Vec::new())
}

/// Like [`encode_graph`] but records the attention-probability nodes of
/// every block/head so tests can inspect softmax rows.
pub fn encode_graph_traced(
    tape: &mut Tape,
    enc: &BoundEncoder,
    cfg: &ViTConfig,
    patches: NodeId,
    visible: &[usize],
    attn_trace: &mut Vec<NodeId>,
) -> Result<NodeId> {
    check_visible(visible, cfg.tokens())?;
    let vis_patches = tape.gather_rows(patches, visible)?;
    let mut x = tape.matmul(vis_patches, enc.patch_weight)?;
    x = tape.add(x, enc.patch_bias)?;
    let pos_vis = tape.gather_rows(enc.pos, visible)?;
    x = tape.add(x, pos_vis)?;
    for block in &enc.blocks {
        x = transformer_block(tape, block, x, cfg.num_heads, attn_trace)?;
    }
    tape.layernorm(x, enc.final_gamma, enc.final_beta, LAYERNORM_EPS)
}

/// Bridge encoder embeddings to decoder width and place them at their
/// original positions; every masked position receives the shared mask
/// token. Positional codes are added to all T tokens before the decoder
/// blocks run. Output is the per-patch pixel prediction for all T patches.
pub fn decode_graph(
    tape: &mut Tape,
    dec: &BoundDecoder,
    cfg: &ViTConfig,
    encoded: NodeId,
    visible: &[usize],
) -> Result<NodeId> {
    check_visible(visible, cfg.tokens())?;
    let tokens = assemble_decoder_tokens(tape, dec, cfg, encoded, visible)?;
    let mut x = tape.add(tokens, dec.pos)?;
    let mut trace = Vec::new();
    for block in &dec.blocks {
        x = transformer_block(tape, block, x, cfg.num_heads, &mut trace)?;
    }
    let x = tape.layernorm(x, dec.final_gamma, dec.final_beta, LAYERNORM_EPS)?;
    let pred = tape.matmul(x, dec.pixel_weight)?;
    tape.add(pred, dec.pixel_bias)
}

/// The decoder input before positional codes: visible embeddings bridged
/// to decoder width and scattered to their token positions, mask token
/// everywhere else. Split out so tests can check that all masked
/// positions carry an identical vector at this point.
pub fn assemble_decoder_tokens(
    tape: &mut Tape,
    dec: &BoundDecoder,
    cfg: &ViTConfig,
    encoded: NodeId,
    visible: &[usize],
) -> Result<NodeId> {
    let bridged = tape.matmul(encoded, dec.bridge_weight)?;
    let bridged = tape.add(bridged, dec.bridge_bias)?;
    tape.scatter_rows(bridged, visible, dec.mask_token, cfg.tokens())
}

/// 2-class logits from a pooled embedding.
pub fn classify_graph(tape: &mut Tape, head: &BoundHead, pooled: NodeId) -> Result<NodeId> {
    let h = tape.matmul(pooled, head.w1)?;
    let h = tape.add(h, head.b1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, head.w2)?;
    let h = tape.add(h, head.b2)?;
    let h = tape.gelu(h);
    let logits = tape.matmul(h, head.w3)?;
    tape.add(logits, head.b3)
}

/// Masked-reconstruction objective: for each mask in the set, reconstruct
/// from the visible tokens and take the MSE over masked pixels only; the
/// per-mask losses are averaged.
pub fn mae_loss_graph(
    tape: &mut Tape,
    enc: &BoundEncoder,
    dec: &BoundDecoder,
    cfg: &ViTConfig,
    patches: NodeId,
    mask_set: &MaskSet,
) -> Result<NodeId> {
    assert!(!mask_set.masks.is_empty());
    let mut losses = Vec::with_capacity(mask_set.masks.len());
    for mask in &mask_set.masks {
        let visible = visible_indices(mask);
        let encoded = encode_graph(tape, enc, cfg, patches, &visible)?;
        let pred = decode_graph(tape, dec, cfg, encoded, &visible)?;
        let elem_mask = patch_space_mask(mask, cfg.patch_dim());
        losses.push(tape.masked_mse(pred, patches, &elem_mask)?);
    }
    if losses.len() == 1 {
        return Ok(losses[0]);
    }
    let stacked = tape.concat_rows(&losses)?;
    Ok(tape.mean_rows(stacked))
}

// ── value-level wrappers (build a throwaway tape, frozen params) ───────

/// Encoder + decoder parameter set; the unit that is pre-trained once and
/// then copied into each adaptation module.
#[derive(Debug, Clone)]
pub struct MaeModel {
    pub cfg: ViTConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl MaeModel {
    pub fn init(cfg: ViTConfig, rng: &mut Rng) -> Self {
        let mut enc_rng = rng.derive_str("encoder");
        let mut dec_rng = rng.derive_str("decoder");
        MaeModel {
            encoder: EncoderParams::init(&cfg, &mut enc_rng),
            decoder: DecoderParams::init(&cfg, &mut dec_rng),
            cfg,
        }
    }

    pub fn digest(&self) -> u64 {
        let mut named = self.encoder.named_tensors();
        named.extend(self.decoder.named_tensors());
        params_digest(&named)
    }
}

/// Anything that can predict all T patches of an image from a visible
/// subset. The trained model implements it; tests substitute an identity
/// rig to pin down the compositing math exactly.
pub trait PatchPredictor {
    fn vit_config(&self) -> &ViTConfig;
    fn predict_patches(&self, img: &GrayImage, visible: &[usize]) -> Result<Tensor>;
}

impl PatchPredictor for MaeModel {
    fn vit_config(&self) -> &ViTConfig {
        &self.cfg
    }

    fn predict_patches(&self, img: &GrayImage, visible: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let enc = BoundEncoder::bind(&mut tape, &self.encoder, false);
        let dec = BoundDecoder::bind(&mut tape, &self.decoder, false);
        let patches = patchify(img, self.cfg.patch_size)?;
        let patches = tape.constant(patches);
        let encoded = encode_graph(&mut tape, &enc, &self.cfg, patches, visible)?;
        let pred = decode_graph(&mut tape, &dec, &self.cfg, encoded, visible)?;
        Ok(tape.value(pred).clone())
    }
}

/// Full-sequence encode of an image (no masking), returning [T x d]
/// token embeddings.
pub fn encode_tokens(cfg: &ViTConfig, enc: &EncoderParams, img: &GrayImage) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundEncoder::bind(&mut tape, enc, false);
    let patches = patchify(img, cfg.patch_size)?;
    let patches = tape.constant(patches);
    let all: Vec<usize> = (0..cfg.tokens()).collect();
    let out = encode_graph(&mut tape, &bound, cfg, patches, &all)?;
    Ok(tape.value(out).clone())
}

/// Mean-pooled d-dimensional embedding of a full-sequence encode.
pub fn embed(cfg: &ViTConfig, enc: &EncoderParams, img: &GrayImage) -> Result<Vec<f64>> {
    let tokens = encode_tokens(cfg, enc, img)?;
    let d = tokens.cols();
    let rows = tokens.rows();
    let mut pooled = vec![0.0; d];
    for row in tokens.data.chunks(d) {
        for (p, v) in pooled.iter_mut().zip(row) {
            *p += v;
        }
    }
    for p in pooled.iter_mut() {
        *p /= rows as f64;
    }
    Ok(pooled)
}

/// Head logits for a pooled embedding.
pub fn classify(head: &HeadParams, pooled: &[f64]) -> Result<[f64; 2]> {
    let mut tape = Tape::new();
    let bound = BoundHead::bind(&mut tape, head, false);
    let input = tape.constant(Tensor::from_vec(vec![1, pooled.len()], pooled.to_vec()));
    let logits = classify_graph(&mut tape, &bound, input)?;
    let v = &tape.value(logits).data;
    Ok([v[0], v[1]])
}

/// Softmax of a 2-logit pair, stable under large magnitudes.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::generate_masks;
    use crate::optim::AdamW;
    use amae_testkit::{fd_gradient, rel_err_inf};

    fn micro_config() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            encoder_depth: 1,
            decoder_depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            decoder_dim: 8,
        }
    }

    fn random_image(rng: &mut Rng, size: usize) -> GrayImage {
        let mut img = GrayImage::new(size, size);
        for p in img.pixels.iter_mut() {
            *p = rng.f64();
        }
        img
    }

    fn flatten(named: &[(String, &Tensor)]) -> Vec<f64> {
        named.iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
    }

    fn load_flat(tensors: Vec<&mut Tensor>, xs: &[f64]) {
        let mut off = 0;
        for t in tensors {
            let n = t.numel();
            t.data.copy_from_slice(&xs[off..off + n]);
            off += n;
        }
        assert_eq!(off, xs.len());
    }

    #[test]
    fn default_config_is_valid() {
        ViTConfig::default().validate().unwrap();
        assert_eq!(ViTConfig::default().tokens(), 64);
        assert_eq!(ViTConfig::default().patch_dim(), 16);
    }

    #[test]
    fn config_rejects_indivisible_dims() {
        let mut cfg = ViTConfig::default();
        cfg.image_size = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = ViTConfig::default();
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn patchify_shape_and_roundtrip() {
        let mut rng = Rng::new(1);
        let img = random_image(&mut rng, 32);
        let patches = patchify(&img, 4).unwrap();
        assert_eq!(patches.shape, vec![64, 16]);
        let back = unpatchify(&patches, 4, 32, 32).unwrap();
        assert_eq!(back, img.pixels);
    }

    #[test]
    fn patchify_constant_image_gives_constant_rows() {
        let img = GrayImage::from_pixels(8, 8, vec![0.37; 64]);
        let patches = patchify(&img, 4).unwrap();
        for row in patches.data.chunks(16) {
            assert!(row.iter().all(|&v| v == 0.37));
        }
    }

    #[test]
    fn patchify_rejects_mismatched_dims() {
        let img = GrayImage::new(30, 30);
        assert!(patchify(&img, 4).is_err());
    }

    #[test]
    fn init_is_deterministic_and_truncated() {
        let cfg = ViTConfig::default();
        let a = MaeModel::init(cfg.clone(), &mut Rng::new(5));
        let b = MaeModel::init(cfg.clone(), &mut Rng::new(5));
        assert_eq!(a.digest(), b.digest());
        for (_, t) in a.encoder.named_tensors() {
            for &v in &t.data {
                assert!(v.abs() <= 1.0, "weight out of plausible range");
            }
        }
        for (name, t) in a.encoder.named_tensors() {
            if name.contains("_w") || name.ends_with("weight") || name.starts_with("encoder.w") {
                assert!(t.data.iter().all(|v| v.abs() <= 0.04), "{name} exceeds cutoff");
            }
            if name.ends_with("gamma") {
                assert!(t.data.iter().all(|&v| v == 1.0), "{name} not ones");
            }
        }
    }

    #[test]
    fn head_final_layer_is_zero_initialized() {
        let cfg = ViTConfig::default();
        let head = HeadParams::init(&cfg, &mut Rng::new(7));
        assert!(head.w3.data.iter().all(|&v| v == 0.0));
        assert!(head.b3.data.iter().all(|&v| v == 0.0));
        let logits = classify(&head, &vec![0.3; cfg.embed_dim]).unwrap();
        assert_eq!(logits, [0.0, 0.0]);
        let probs = softmax2(logits);
        assert_eq!(probs, [0.5, 0.5]);
    }

    #[test]
    fn tensors_mut_matches_named_order() {
        let cfg = micro_config();
        let mut model = MaeModel::init(cfg.clone(), &mut Rng::new(11));
        let shapes: Vec<Vec<usize>> = model
            .encoder
            .named_tensors()
            .iter()
            .map(|(_, t)| t.shape.clone())
            .collect();
        let mut_shapes: Vec<Vec<usize>> = model
            .encoder
            .tensors_mut()
            .iter()
            .map(|t| t.shape.clone())
            .collect();
        assert_eq!(shapes, mut_shapes);
        let shapes: Vec<Vec<usize>> = model
            .decoder
            .named_tensors()
            .iter()
            .map(|(_, t)| t.shape.clone())
            .collect();
        let mut_shapes: Vec<Vec<usize>> = model
            .decoder
            .tensors_mut()
            .iter()
            .map(|t| t.shape.clone())
            .collect();
        assert_eq!(shapes, mut_shapes);
    }

    #[test]
    fn encode_shapes_match_visibility() {
        let cfg = ViTConfig::default();
        let model = MaeModel::init(cfg.clone(), &mut Rng::new(13));
        let mut rng = Rng::new(14);
        let img = random_image(&mut rng, 32);

        // Masking at the default ratio leaves 16 of 64 tokens visible.
        let set = generate_masks(cfg.tokens(), 0.75, 1, &mut rng).unwrap();
        let visible = visible_indices(&set.masks[0]);
        assert_eq!(visible.len(), 16);

        let mut tape = Tape::new();
        let enc = BoundEncoder::bind(&mut tape, &model.encoder, false);
        let patches = patchify(&img, cfg.patch_size).unwrap();
        let patches = tape.constant(patches);
        let out = encode_graph(&mut tape, &enc, &cfg, patches, &visible).unwrap();
        assert_eq!(tape.value(out).shape, vec![16, 64]);

        let full = encode_tokens(&cfg, &model.encoder, &img).unwrap();
        assert_eq!(full.shape, vec![64, 64]);
    }

    #[test]
    fn encode_rejects_bad_visible_lists() {
        let cfg = micro_config();
        let model = MaeModel::init(cfg.clone(), &mut Rng::new(15));
        let img = random_image(&mut Rng::new(16), 8);
        let patches = patchify(&img, cfg.patch_size).unwrap();

        let mut tape = Tape::new();
        let enc = BoundEncoder::bind(&mut tape, &model.encoder, false);
        let p = tape.constant(patches.clone());
        assert!(matches!(
            encode_graph(&mut tape, &enc, &cfg, p, &[0, 9]),
            Err(Error::IndexOutOfRange { index: 9, len: 4 })
        ));
        let mut tape = Tape::new();
        let enc = BoundEncoder::bind(&mut tape, &model.encoder, false);
        let p = tape.constant(patches);
        assert!(encode_graph(&mut tape, &enc, &cfg, p, &[2, 1]).is_err());
    }

    #[test]
    fn encoding_has_no_cross_image_state() {
        let cfg = micro_config();
        let model = MaeModel::init(cfg.clone(), &mut Rng::new(17));
        let mut rng = Rng::new(18);
        let a = random_image(&mut rng, 8);
        let b = random_image(&mut rng, 8);
        let ea1 = encode_tokens(&cfg, &model.encoder, &a).unwrap();
        let eb1 = encode_tokens(&cfg, &model.encoder, &b).unwrap();
        // Opposite processing order, bit-identical results.
        let eb2 = encode_tokens(&cfg, &model.encoder, &b).unwrap();
        let ea2 = encode_tokens(&cfg, &model.encoder, &a).unwrap();
        assert_eq!(ea1.data, ea2.data);
        assert_eq!(eb1.data, eb2.data);
    }

    #[test]
    fn decode_output_covers_all_patches() {
        let cfg = ViTConfig::default();
        let model = MaeModel::init(cfg.clone(), &mut Rng::new(19));
        let mut rng = Rng::new(20);
        let img = random_image(&mut rng, 32);
        for ratio in [0.5, 0.75, 0.9] {
            let set = generate_masks(cfg.tokens(), ratio, 1, &mut rng).unwrap();
            let visible = visible_indices(&set.masks[0]);
            let pred = model.predict_patches(&img, &visible).unwrap();
            assert_eq!(pred.shape, vec![cfg.tokens(), cfg.patch_dim()]);
        }
    }

    #[test]
    fn masked_positions_share_the_mask_token_before_positions() {
        let cfg = micro_config();
        let model = MaeModel::init(cfg.clone(), &mut Rng::new(21));
        let img = random_image(&mut Rng::new(22), 8);
        let visible = vec![1usize];
        let mut tape = Tape::new();
        let enc = BoundEncoder::bind(&mut tape, &model.encoder, false);
        let dec = BoundDecoder::bind(&mut tape, &model.decoder, false);
        let patches = tape.constant(patchify(&img, cfg.patch_size).unwrap());
        let encoded = encode_graph(&mut tape, &enc, &cfg, patches, &visible).unwrap();
        let tokens = assemble_decoder_tokens(&mut tape, &dec, &cfg, encoded, &visible).unwrap();
        let v = tape.value(tokens);
        let dd = cfg.decoder_dim;
        for t in 0..cfg.tokens() {
            if visible.contains(&t) {
                continue;
            }
            assert_eq!(&v.data[t * dd..(t + 1) * dd], &model.decoder.mask_token.data[..]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = ViTConfig::default();
        let model = MaeModel::init(cfg.clone(), &mut Rng::new(23));
        let img = random_image(&mut Rng::new(24), 32);
        let mut tape = Tape::new();
        let enc = BoundEncoder::bind(&mut tape, &model.encoder, false);
        let patches = tape.constant(patchify(&img, cfg.patch_size).unwrap());
        let all: Vec<usize> = (0..cfg.tokens()).collect();
        let mut trace = Vec::new();
        encode_graph_traced(&mut tape, &enc, &cfg, patches, &all, &mut trace).unwrap();
        assert_eq!(trace.len(), cfg.encoder_depth * cfg.num_heads);
        for probs in trace {
            let t = tape.value(probs);
            for row in t.data.chunks(t.cols()) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "attention row sums to {sum}");
            }
        }
    }

    #[test]
    fn head_is_lightweight_relative_to_encoder() {
        let cfg = ViTConfig::default();
        let mut rng = Rng::new(25);
        let enc = EncoderParams::init(&cfg, &mut rng);
        let head = HeadParams::init(&cfg, &mut rng);
        assert!(
            (head.param_count() as f64) < 0.05 * enc.param_count() as f64,
            "head {} vs encoder {}",
            head.param_count(),
            enc.param_count()
        );
    }

    #[test]
    fn classify_is_deterministic() {
        let cfg = ViTConfig::default();
        let mut rng = Rng::new(27);
        let mut head = HeadParams::init(&cfg, &mut rng);
        // give the final layer real weights
        head.w3 = Tensor::from_vec(vec![cfg.embed_dim, 2], (0..cfg.embed_dim * 2).map(|i| (i as f64).sin() * 0.1).collect());
        let pooled: Vec<f64> = (0..cfg.embed_dim).map(|i| (i as f64 * 0.3).cos()).collect();
        let a = classify(&head, &pooled).unwrap();
        let b = classify(&head, &pooled).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn head_gradient_matches_fd() {
        let cfg = micro_config();
        let mut rng = Rng::new(29);
        let mut head = HeadParams::init(&cfg, &mut rng);
        // non-zero final layer so its gradient is informative
        head.w3 = trunc_normal_tensor(vec![cfg.embed_dim, 2], &mut rng);
        let pooled = Tensor::from_vec(
            vec![1, cfg.embed_dim],
            (0..cfg.embed_dim).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );

        let mut tape = Tape::new();
        let bound = BoundHead::bind(&mut tape, &head, true);
        let input = tape.constant(pooled.clone());
        let logits = classify_graph(&mut tape, &bound, input).unwrap();
        let loss = tape.cross_entropy(logits, &[1]).unwrap();
        let grads = tape.backward(loss);
        let analytic: Vec<f64> = bound
            .param_ids()
            .iter()
            .flat_map(|&id| grads.of(id).unwrap().to_vec())
            .collect();

        let x0 = flatten(&head.named_tensors());
        let template = head.clone();
        let mut f = |xs: &[f64]| {
            let mut h = template.clone();
            load_flat(h.tensors_mut(), xs);
            let mut t = Tape::new();
            let bound = BoundHead::bind(&mut t, &h, false);
            let input = t.constant(pooled.clone());
            let logits = classify_graph(&mut t, &bound, input).unwrap();
            let loss = t.cross_entropy(logits, &[1]).unwrap();
            t.value(loss).item()
        };
        let numeric = fd_gradient(&mut f, &x0, 1e-5);
        let err = rel_err_inf(&analytic, &numeric);
        assert!(err < 1e-5, "head gradient rel err {err:.3e}");
    }

    #[test]
    fn micro_pipeline_gradient_matches_fd() {
        // Whole encoder+decoder through the masked objective on an 8x8
        // image: one flattened parameter vector against the FD oracle.
        let cfg = micro_config();
        let model = MaeModel::init(cfg.clone(), &mut Rng::new(31));
        let img = random_image(&mut Rng::new(32), 8);
        let mut mask_rng = Rng::new(33);
        let set = generate_masks(cfg.tokens(), 0.5, 2, &mut mask_rng).unwrap();
        let patches = patchify(&img, cfg.patch_size).unwrap();

        let mut tape = Tape::new();
        let enc = BoundEncoder::bind(&mut tape, &model.encoder, true);
        let dec = BoundDecoder::bind(&mut tape, &model.decoder, true);
        let p = tape.constant(patches.clone());
        let loss = mae_loss_graph(&mut tape, &enc, &dec, &cfg, p, &set).unwrap();
        let grads = tape.backward(loss);
        let mut analytic = Vec::new();
        for id in enc.param_ids().into_iter().chain(dec.param_ids()) {
            analytic.extend_from_slice(grads.of(id).unwrap());
        }

        let mut named = model.encoder.named_tensors();
        named.extend(model.decoder.named_tensors());
        let x0 = flatten(&named);
        let template = model.clone();
        let set2 = set.clone();
        let mut f = |xs: &[f64]| {
            let mut m = template.clone();
            let enc_n: usize = m.encoder.named_tensors().iter().map(|(_, t)| t.numel()).sum();
            load_flat(m.encoder.tensors_mut(), &xs[..enc_n]);
            load_flat(m.decoder.tensors_mut(), &xs[enc_n..]);
            let mut t = Tape::new();
            let enc = BoundEncoder::bind(&mut t, &m.encoder, false);
            let dec = BoundDecoder::bind(&mut t, &m.decoder, false);
            let p = t.constant(patches.clone());
            let loss = mae_loss_graph(&mut t, &enc, &dec, &cfg, p, &set2).unwrap();
            t.value(loss).item()
        };
        let numeric = fd_gradient(&mut f, &x0, 1e-5);
        let err = rel_err_inf(&analytic, &numeric);
        assert!(err < 1e-4, "micro pipeline gradient rel err {err:.3e}");
    }

    #[test]
    fn single_image_overfit_aligns_tokens_with_positions() {
        // Memorizing one image forces reconstruction through the
        // positional codes; success means patch t of the prediction lands
        // at image position t.
        let cfg = ViTConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            encoder_depth: 1,
            decoder_depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            decoder_dim: 16,
        };
        let mut model = MaeModel::init(cfg.clone(), &mut Rng::new(41));
        let img = random_image(&mut Rng::new(42), 16);
        let patches = patchify(&img, cfg.patch_size).unwrap();

        let sizes: Vec<usize> = model
            .encoder
            .named_tensors()
            .iter()
            .chain(model.decoder.named_tensors().iter())
            .map(|(_, t)| t.numel())
            .collect();
        let mut opt = AdamW::new(&sizes, 0.0);
        let mut mask_rng = Rng::new(43);
        for _ in 0..2000 {
            let set = generate_masks(cfg.tokens(), 0.5, 1, &mut mask_rng).unwrap();
            let mut tape = Tape::new();
            let enc = BoundEncoder::bind(&mut tape, &model.encoder, true);
            let dec = BoundDecoder::bind(&mut tape, &model.decoder, true);
            let p = tape.constant(patches.clone());
            let loss = mae_loss_graph(&mut tape, &enc, &dec, &cfg, p, &set).unwrap();
            let grads = tape.backward(loss);
            let grad_vecs: Vec<Vec<f64>> = enc
                .param_ids()
                .into_iter()
                .chain(dec.param_ids())
                .map(|id| grads.of(id).unwrap().to_vec())
                .collect();
            let mut params = model.encoder.tensors_mut();
            params.extend(model.decoder.tensors_mut());
            opt.step(4e-3, &mut params, &grad_vecs);
        }

        // Fresh mask: error on the *masked* patches must be tiny.
        let set = generate_masks(cfg.tokens(), 0.5, 1, &mut mask_rng).unwrap();
        let visible = visible_indices(&set.masks[0]);
        let pred = model.predict_patches(&img, &visible).unwrap();
        let elem_mask = patch_space_mask(&set.masks[0], cfg.patch_dim());
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..elem_mask.len() {
            if elem_mask[i] {
                let d = pred.data[i] - patches.data[i];
                sum += d * d;
                count += 1;
            }
        }
        let mse = sum / count as f64;
        assert!(mse < 1e-3, "masked reconstruction error {mse}");
    }

    #[test]
    fn sincos_table_is_deterministic_and_shaped() {
        let a = sincos_pos_2d(8, 64);
        let b = sincos_pos_2d(8, 64);
        assert_eq!(a.data, b.data);
        assert_eq!(a.shape, vec![64, 64]);
        // distinct positions get distinct codes
        assert_ne!(a.data[0..64], a.data[64..128]);
    }
}
