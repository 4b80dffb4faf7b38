//! Multi-branch encoder-decoder restoration backbone.
//!
//! Structure: a 3×3 stem lifts the RGB input to the base width, four
//! encoder stages separated by pixel-unshuffle downsampling, three decoder
//! stages with pixel-shuffle upsampling and concatenated skip connections
//! (1×1-reduced except at the last, full-resolution stage), one refinement
//! stage, and a final 3×3 convolution producing a residual image `R`. The
//! network output is `input + R`, so zeroing the final convolution makes
//! restoration the exact identity.
//!
//! Each stage embeds its input through parallel deformable branches of
//! increasing depth, runs a stack of attention blocks per branch, and fuses
//! the branches with selective kernel feature fusion (per-channel softmax
//! over branches of a pooled descriptor).

use crate::attention::{tmsa_pp_full, AttentionConfig, TmsaWeights};
use crate::conv::{dense_conv, depthwise, pointwise};
use crate::embedding::{
    init_branch_weights, multi_scale_patch_embed, DeformableEmbedConfig, DsdcnWeights,
};
use crate::error::{Error, Result};
use crate::io::{tensor_from_bytes, tensor_to_bytes, write_atomic};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_SCALE: f64 = 0.02;

/// Full model hyperparameters: 4 encoder stages, 3 decoder stages, one
/// refinement stage (8 entries per list).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub branches: Vec<usize>,
    pub blocks: Vec<usize>,
    pub channels: Vec<usize>,
    pub base_channels: usize,
    /// Heads per stage = largest divisor of the stage width that is at most
    /// `channels / heads_divisor` (and at least 1).
    pub heads_divisor: usize,
    pub focused_factor: f64,
    pub modulation: f64,
    pub epsilon: f64,
    pub offset_bound: f64,
    pub embed_kernel: usize,
    pub cpe_kernels: Vec<usize>,
    pub bias_free: bool,
}

impl ModelConfig {
    /// Desk-scale variant: sub-second forward passes, same topology as the
    /// full-size variants.
    pub fn nano() -> ModelConfig {
        ModelConfig {
            branches: vec![2; 8],
            blocks: vec![1; 8],
            channels: vec![8, 16, 24, 32, 24, 16, 8, 8],
            base_channels: 8,
            heads_divisor: 8,
            focused_factor: 4.0,
            modulation: 0.5,
            epsilon: 1e-6,
            offset_bound: 3.0,
            embed_kernel: 3,
            cpe_kernels: vec![3, 5],
            bias_free: false,
        }
    }

    /// Base variant (2.63M-parameter class).
    pub fn variant_b() -> ModelConfig {
        ModelConfig {
            branches: vec![2; 8],
            blocks: vec![2, 3, 3, 4, 3, 3, 2, 2],
            channels: vec![24, 48, 72, 96, 72, 48, 24, 24],
            base_channels: 24,
            heads_divisor: 24,
            ..ModelConfig::nano()
        }
    }

    /// Large variant.
    pub fn variant_l() -> ModelConfig {
        ModelConfig {
            branches: vec![2, 3, 3, 3, 3, 3, 2, 2],
            blocks: vec![4, 6, 6, 8, 6, 6, 4, 4],
            channels: vec![24, 48, 72, 96, 72, 48, 24, 24],
            base_channels: 24,
            heads_divisor: 24,
            ..ModelConfig::nano()
        }
    }

    /// Extra-large variant.
    pub fn variant_xl() -> ModelConfig {
        ModelConfig {
            branches: vec![2, 3, 3, 3, 3, 3, 2, 2],
            blocks: vec![4, 6, 6, 8, 6, 6, 4, 4],
            channels: vec![28, 56, 112, 160, 112, 56, 28, 28],
            base_channels: 28,
            heads_divisor: 24,
            ..ModelConfig::nano()
        }
    }

    pub fn by_name(name: &str) -> Result<ModelConfig> {
        match name {
            "nano" => Ok(ModelConfig::nano()),
            "b" => Ok(ModelConfig::variant_b()),
            "l" => Ok(ModelConfig::variant_l()),
            "xl" => Ok(ModelConfig::variant_xl()),
            other => Err(Error::Config(format!("unknown model variant '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.len() != 8 || self.blocks.len() != 8 || self.channels.len() != 8 {
            return Err(Error::Config("model: stage lists must have 8 entries".into()));
        }
        if self.branches.iter().any(|&b| b < 2) {
            return Err(Error::Config("model: every stage needs at least 2 branches".into()));
        }
        if self.blocks.iter().any(|&b| b == 0) || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("model: blocks and channels must be positive".into()));
        }
        // decoder widths mirror the encoder
        if self.channels[4] != self.channels[2]
            || self.channels[5] != self.channels[1]
            || self.channels[6] != self.channels[0]
        {
            return Err(Error::Config("model: decoder channels must mirror encoder channels".into()));
        }
        if self.base_channels == 0 || self.heads_divisor == 0 {
            return Err(Error::Config("model: base channels and heads divisor must be positive".into()));
        }
        for stage in 0..8 {
            let h = self.heads(stage);
            if self.channels[stage] % h != 0 {
                return Err(Error::Config(format!(
                    "model: stage {stage} width {} not divisible by {h} heads",
                    self.channels[stage]
                )));
            }
        }
        Ok(())
    }

    /// Heads at a stage: the largest divisor of the width not exceeding
    /// `width / heads_divisor` (minimum 1).
    pub fn heads(&self, stage: usize) -> usize {
        let c = self.channels[stage];
        let target = (c / self.heads_divisor).max(1);
        (1..=target).rev().find(|h| c % h == 0).unwrap_or(1)
    }

    pub fn attention_config(&self, stage: usize) -> AttentionConfig {
        let heads = self.heads(stage);
        AttentionConfig {
            heads,
            head_dim: self.channels[stage] / heads,
            focused_factor: self.focused_factor,
            modulation: self.modulation,
            epsilon: self.epsilon,
            cpe_kernels: self.cpe_kernels.clone(),
        }
    }

    /// Serialize as the plain-text key/value config document.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "branches = {}", list(&self.branches));
        let _ = writeln!(s, "blocks = {}", list(&self.blocks));
        let _ = writeln!(s, "channels = {}", list(&self.channels));
        let _ = writeln!(s, "base_channels = {}", self.base_channels);
        let _ = writeln!(s, "heads_divisor = {}", self.heads_divisor);
        let _ = writeln!(s, "focused_factor = {}", self.focused_factor);
        let _ = writeln!(s, "modulation = {}", self.modulation);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "offset_bound = {}", self.offset_bound);
        let _ = writeln!(s, "embed_kernel = {}", self.embed_kernel);
        let _ = writeln!(s, "cpe_kernels = {}", list(&self.cpe_kernels));
        let _ = writeln!(s, "bias_free = {}", self.bias_free);
        s
    }

    /// Parse the plain-text key/value config document.
    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::nano();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("config line {}: missing '='", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let parse_list = |v: &str| -> Result<Vec<usize>> {
                v.split(',')
                    .map(|t| t.trim().parse::<usize>().map_err(|_| Error::Parse(format!("config: bad integer '{t}'"))))
                    .collect()
            };
            let parse_f64 = |v: &str| -> Result<f64> {
                v.parse::<f64>().map_err(|_| Error::Parse(format!("config: bad number '{v}'")))
            };
            let parse_usize = |v: &str| -> Result<usize> {
                v.parse::<usize>().map_err(|_| Error::Parse(format!("config: bad integer '{v}'")))
            };
            match key {
                "branches" => cfg.branches = parse_list(value)?,
                "blocks" => cfg.blocks = parse_list(value)?,
                "channels" => cfg.channels = parse_list(value)?,
                "base_channels" => cfg.base_channels = parse_usize(value)?,
                "heads_divisor" => cfg.heads_divisor = parse_usize(value)?,
                "focused_factor" => cfg.focused_factor = parse_f64(value)?,
                "modulation" => cfg.modulation = parse_f64(value)?,
                "epsilon" => cfg.epsilon = parse_f64(value)?,
                "offset_bound" => cfg.offset_bound = parse_f64(value)?,
                "embed_kernel" => cfg.embed_kernel = parse_usize(value)?,
                "cpe_kernels" => cfg.cpe_kernels = parse_list(value)?,
                "bias_free" => {
                    cfg.bias_free = match value {
                        "true" => true,
                        "false" => false,
                        _ => return Err(Error::Parse(format!("config: bad bool '{value}'"))),
                    }
                }
                other => return Err(Error::Parse(format!("config: unknown key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Selective kernel feature fusion
// ---------------------------------------------------------------------------

/// SKFF weights: pooled-descriptor squeeze plus one expansion per branch.
#[derive(Debug, Clone)]
pub struct SkffWeights {
    /// `[r × C]` squeeze of the pooled descriptor.
    pub squeeze: Tensor,
    pub squeeze_bias: Tensor,
    /// Per-branch `[C × r]` expansions producing the softmax logits.
    pub expand: Vec<Tensor>,
    pub expand_bias: Vec<Tensor>,
}

impl SkffWeights {
    pub fn reduced_dim(channels: usize) -> usize {
        (channels / 8).max(1)
    }

    pub fn init(channels: usize, branches: usize, rng: &mut Rng, scale: f64) -> SkffWeights {
        let r = Self::reduced_dim(channels);
        SkffWeights {
            squeeze: rng.trunc_normal_tensor(&[r, channels], scale),
            squeeze_bias: Tensor::zeros(&[r]),
            expand: (0..branches).map(|_| rng.trunc_normal_tensor(&[channels, r], scale)).collect(),
            expand_bias: (0..branches).map(|_| Tensor::zeros(&[channels])).collect(),
        }
    }

    pub fn zeros(channels: usize, branches: usize) -> SkffWeights {
        let r = Self::reduced_dim(channels);
        SkffWeights {
            squeeze: Tensor::zeros(&[r, channels]),
            squeeze_bias: Tensor::zeros(&[r]),
            expand: (0..branches).map(|_| Tensor::zeros(&[channels, r])).collect(),
            expand_bias: (0..branches).map(|_| Tensor::zeros(&[channels])).collect(),
        }
    }
}

/// Selective kernel feature fusion: pool the branch sum, squeeze it, emit
/// one logit vector per branch, softmax across branches per channel, and
/// blend. The per-channel weights form a probability vector, so the fused
/// output is a convex combination of the branch features.
pub fn skff_fuse(branch_feats: &[Tensor], w: &SkffWeights) -> Result<Tensor> {
    if branch_feats.len() < 2 {
        return Err(Error::Config("skff: need at least 2 branches".into()));
    }
    let shape = branch_feats[0].shape().to_vec();
    if branch_feats.iter().any(|f| f.shape() != shape) || shape.len() != 3 {
        return Err(Error::Shape("skff: branch features must share a C×h×w shape".into()));
    }
    let (c, h, wd) = (shape[0], shape[1], shape[2]);
    if w.expand.len() != branch_feats.len() || w.squeeze.shape()[1] != c {
        return Err(Error::Shape("skff: weights do not match branches/channels".into()));
    }
    let r = w.squeeze.shape()[0];
    let hw = (h * wd) as f64;
    // global average pool of the branch sum
    let mut pooled = vec![0.0; c];
    for f in branch_feats {
        for ch in 0..c {
            pooled[ch] += f.plane(ch).iter().sum::<f64>() / hw;
        }
    }
    // squeeze with ReLU
    let mut desc = vec![0.0; r];
    for i in 0..r {
        let mut acc = w.squeeze_bias.data()[i];
        for ch in 0..c {
            acc += w.squeeze.at2(i, ch) * pooled[ch];
        }
        desc[i] = acc.max(0.0);
    }
    // per-branch logits, softmax across branches per channel
    let nb = branch_feats.len();
    let mut logits = vec![vec![0.0; c]; nb];
    for (b, lw) in w.expand.iter().enumerate() {
        for ch in 0..c {
            let mut acc = w.expand_bias[b].data()[ch];
            for i in 0..r {
                acc += lw.at2(ch, i) * desc[i];
            }
            logits[b][ch] = acc;
        }
    }
    let mut out = Tensor::zeros(&shape);
    for ch in 0..c {
        let max = logits.iter().map(|l| l[ch]).fold(f64::NEG_INFINITY, f64::max);
        let mut den = 0.0;
        let mut alpha = vec![0.0; nb];
        for b in 0..nb {
            alpha[b] = (logits[b][ch] - max).exp();
            den += alpha[b];
        }
        for b in 0..nb {
            let a = alpha[b] / den;
            let plane = branch_feats[b].plane(ch);
            let hw_len = h * wd;
            let out_plane = &mut out.data_mut()[ch * hw_len..(ch + 1) * hw_len];
            for (o, &v) in out_plane.iter_mut().zip(plane) {
                *o += a * v;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pixel shuffle / unshuffle
// ---------------------------------------------------------------------------

/// Space-to-depth: `[C×h×w] -> [Cr²×h/r×w/r]`. The sub-pixel at offset
/// `(dy, dx)` of channel `c` lands in output channel `c·r² + dy·r + dx`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Shape("pixel_unshuffle: input must be C×h×w".into()));
    }
    if r == 0 {
        return Err(Error::Config("pixel_unshuffle: r must be positive".into()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!("pixel_unshuffle: {h}x{w} not divisible by {r}")));
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = Tensor::zeros(&[c * r * r, oh, ow]);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let oc = ch * r * r + (y % r) * r + (xx % r);
                out.set3(oc, y / r, xx / r, x.at3(ch, y, xx));
            }
        }
    }
    Ok(out)
}

/// Depth-to-space, the exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Shape("pixel_shuffle: input must be C×h×w".into()));
    }
    if r == 0 {
        return Err(Error::Config("pixel_shuffle: r must be positive".into()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c % (r * r) != 0 {
        return Err(Error::Shape(format!("pixel_shuffle: {c} channels not divisible by {}", r * r)));
    }
    let oc = c / (r * r);
    let mut out = Tensor::zeros(&[oc, h * r, w * r]);
    for ch in 0..oc {
        for dy in 0..r {
            for dx in 0..r {
                let ic = ch * r * r + dy * r + dx;
                for y in 0..h {
                    for xx in 0..w {
                        out.set3(ch, y * r + dy, xx * r + dx, x.at3(ic, y, xx));
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Layer norm and transformer block
// ---------------------------------------------------------------------------

/// Channel-wise layer normalization weights.
#[derive(Debug, Clone)]
pub struct NormWeights {
    pub gamma: Tensor,
    /// Absent in the bias-free variant.
    pub beta: Option<Tensor>,
}

impl NormWeights {
    pub fn init(channels: usize, bias_free: bool) -> NormWeights {
        NormWeights {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: if bias_free { None } else { Some(Tensor::zeros(&[channels])) },
        }
    }
}

/// Channel-wise layer norm at every pixel (no spatial statistics, so the
/// block is resolution independent). The bias-free variant divides by the
/// channel standard deviation without re-centering.
pub fn layer_norm(x: &Tensor, w: &NormWeights) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Shape("layer_norm: input must be C×h×w".into()));
    }
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if w.gamma.shape() != [c] {
        return Err(Error::Shape("layer_norm: gamma length mismatch".into()));
    }
    let mut out = Tensor::zeros(&[c, h, wd]);
    for y in 0..h {
        for xx in 0..wd {
            let mut mean = 0.0;
            for ch in 0..c {
                mean += x.at3(ch, y, xx);
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = x.at3(ch, y, xx) - mean;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for ch in 0..c {
                let v = x.at3(ch, y, xx);
                let normed = match &w.beta {
                    Some(beta) => (v - mean) * inv * w.gamma.data()[ch] + beta.data()[ch],
                    None => v * inv * w.gamma.data()[ch],
                };
                out.set3(ch, y, xx, normed);
            }
        }
    }
    Ok(out)
}

/// Feed-forward substitute: two depthwise streams (kernels 3 and 5) fused
/// by SKFF at reduction 8.
#[derive(Debug, Clone)]
pub struct FfnWeights {
    pub point3: Tensor,
    pub point3_bias: Tensor,
    pub point5: Tensor,
    pub point5_bias: Tensor,
    pub depth3: Tensor,
    pub depth5: Tensor,
    pub skff: SkffWeights,
}

impl FfnWeights {
    pub fn init(c: usize, rng: &mut Rng, scale: f64) -> FfnWeights {
        FfnWeights {
            point3: rng.trunc_normal_tensor(&[c, c], scale),
            point3_bias: Tensor::zeros(&[c]),
            point5: rng.trunc_normal_tensor(&[c, c], scale),
            point5_bias: Tensor::zeros(&[c]),
            depth3: rng.trunc_normal_tensor(&[c, 3, 3], scale),
            depth5: rng.trunc_normal_tensor(&[c, 5, 5], scale),
            skff: SkffWeights::init(c, 2, rng, scale),
        }
    }
}

fn ffn_forward(x: &Tensor, w: &FfnWeights) -> Result<Tensor> {
    let s3 = depthwise(&pointwise(x, &w.point3, Some(&w.point3_bias))?, &w.depth3, None, 1)?;
    let s5 = depthwise(&pointwise(x, &w.point5, Some(&w.point5_bias))?, &w.depth5, None, 1)?;
    skff_fuse(&[s3, s5], &w.skff)
}

/// One transformer block: attention and FFN-substitute residual branches,
/// each behind a pre-norm.
#[derive(Debug, Clone)]
pub struct TransformerBlockWeights {
    pub norm1: NormWeights,
    pub attn: TmsaWeights,
    pub norm2: NormWeights,
    pub ffn: FfnWeights,
}

impl TransformerBlockWeights {
    pub fn init(c: usize, cfg: &AttentionConfig, bias_free: bool, rng: &mut Rng, scale: f64) -> Result<TransformerBlockWeights> {
        Ok(TransformerBlockWeights {
            norm1: NormWeights::init(c, bias_free),
            attn: TmsaWeights::init(c, c, c, cfg, rng, scale)?,
            norm2: NormWeights::init(c, bias_free),
            ffn: FfnWeights::init(c, rng, scale),
        })
    }
}

/// Pre-norm residual block: `x + Attn(LN(x))`, then `x + Ffn(LN(x))`.
pub fn transformer_block(x: &Tensor, w: &TransformerBlockWeights, cfg: &AttentionConfig) -> Result<Tensor> {
    let a = tmsa_pp_full(&layer_norm(x, &w.norm1)?, &w.attn, cfg)?;
    let x = x.add(&a)?;
    let f = ffn_forward(&layer_norm(&x, &w.norm2)?, &w.ffn)?;
    x.add(&f)
}

// ---------------------------------------------------------------------------
// Stages and the full model
// ---------------------------------------------------------------------------

/// Weights of one stage: per-branch embedding stacks, per-branch block
/// stacks, and the fusion module.
#[derive(Debug, Clone)]
pub struct StageWeights {
    pub embed: Vec<Vec<DsdcnWeights>>,
    pub blocks: Vec<Vec<TransformerBlockWeights>>,
    pub skff: SkffWeights,
}

/// 1×1 convolution weights used by upsamplers and skip reducers.
#[derive(Debug, Clone)]
pub struct PointwiseWeights {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl PointwiseWeights {
    fn init(c_in: usize, c_out: usize, rng: &mut Rng, scale: f64) -> PointwiseWeights {
        PointwiseWeights {
            weight: rng.trunc_normal_tensor(&[c_out, c_in], scale),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

/// Dense conv weights (stem and final head).
#[derive(Debug, Clone)]
pub struct DenseConvWeights {
    pub weight: Tensor, // [C_out × C_in × K × K]
    pub bias: Tensor,
}

impl DenseConvWeights {
    fn init(c_in: usize, c_out: usize, k: usize, rng: &mut Rng, scale: f64) -> DenseConvWeights {
        DenseConvWeights {
            weight: rng.trunc_normal_tensor(&[c_out, c_in, k, k], scale),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    fn zeros(c_in: usize, c_out: usize, k: usize) -> DenseConvWeights {
        DenseConvWeights { weight: Tensor::zeros(&[c_out, c_in, k, k]), bias: Tensor::zeros(&[c_out]) }
    }
}

/// All model weights in stage order.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub stem: DenseConvWeights,
    pub stages: Vec<StageWeights>,
    /// Upsamplers between stage 3→4, 4→5, 5→6.
    pub ups: Vec<PointwiseWeights>,
    /// Skip reducers for decoder stages 4 and 5 (stage 6 concatenates
    /// without reduction).
    pub skip_reduce: Vec<PointwiseWeights>,
    pub final_conv: DenseConvWeights,
}

/// Channel width entering each stage's patch embedding.
fn stage_input_channels(cfg: &ModelConfig, stage: usize) -> usize {
    match stage {
        0 => cfg.base_channels,
        1 => cfg.channels[0] * 4,
        2 => cfg.channels[1] * 4,
        3 => cfg.channels[2] * 4,
        4 => cfg.channels[4],            // after skip reduction
        5 => cfg.channels[5],            // after skip reduction
        6 => cfg.channels[6] * 2,        // concat without reduction
        7 => cfg.channels[6],
        _ => unreachable!(),
    }
}

fn stage_branch_cfgs(cfg: &ModelConfig, stage: usize) -> Vec<DeformableEmbedConfig> {
    DeformableEmbedConfig::branch_family(
        cfg.branches[stage],
        stage_input_channels(cfg, stage),
        cfg.channels[stage],
        cfg.embed_kernel,
        cfg.offset_bound,
        1,
    )
}

impl ModelWeights {
    /// Seeded initialization: truncated normal (scale 0.02) projections,
    /// zero offset heads, unit norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelWeights> {
        cfg.validate()?;
        let stem = DenseConvWeights::init(3, cfg.base_channels, 3, rng, INIT_SCALE);
        let mut stages = Vec::with_capacity(8);
        for stage in 0..8 {
            let acfg = cfg.attention_config(stage);
            let c = cfg.channels[stage];
            let branch_cfgs = stage_branch_cfgs(cfg, stage);
            let embed: Vec<Vec<DsdcnWeights>> =
                branch_cfgs.iter().map(|b| init_branch_weights(b, rng, INIT_SCALE)).collect();
            let mut blocks = Vec::with_capacity(cfg.branches[stage]);
            for _ in 0..cfg.branches[stage] {
                let mut stack = Vec::with_capacity(cfg.blocks[stage]);
                for _ in 0..cfg.blocks[stage] {
                    stack.push(TransformerBlockWeights::init(c, &acfg, cfg.bias_free, rng, INIT_SCALE)?);
                }
                blocks.push(stack);
            }
            let skff = SkffWeights::init(c, cfg.branches[stage], rng, INIT_SCALE);
            stages.push(StageWeights { embed, blocks, skff });
        }
        let ups = vec![
            PointwiseWeights::init(cfg.channels[3], 4 * cfg.channels[4], rng, INIT_SCALE),
            PointwiseWeights::init(cfg.channels[4], 4 * cfg.channels[5], rng, INIT_SCALE),
            PointwiseWeights::init(cfg.channels[5], 4 * cfg.channels[6], rng, INIT_SCALE),
        ];
        let skip_reduce = vec![
            PointwiseWeights::init(2 * cfg.channels[4], cfg.channels[4], rng, INIT_SCALE),
            PointwiseWeights::init(2 * cfg.channels[5], cfg.channels[5], rng, INIT_SCALE),
        ];
        let final_conv = DenseConvWeights::init(cfg.channels[7], 3, 3, rng, INIT_SCALE);
        Ok(ModelWeights { stem, stages, ups, skip_reduce, final_conv })
    }

    /// Identity checkpoint: everything initialized as in [`init`] with seed
    /// 0 but the final convolution zeroed, so restoration is exactly the
    /// identity map.
    pub fn zero_final(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelWeights> {
        let mut w = ModelWeights::init(cfg, rng)?;
        w.final_conv = DenseConvWeights::zeros(cfg.channels[7], 3, 3);
        Ok(w)
    }

    /// Visit every parameter tensor with its path, in canonical order.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("stem.weight", &self.stem.weight);
        f("stem.bias", &self.stem.bias);
        for (si, st) in self.stages.iter().enumerate() {
            for (bi, stack) in st.embed.iter().enumerate() {
                for (li, l) in stack.iter().enumerate() {
                    let p = format!("stage{si}.branch{bi}.embed{li}");
                    f(&format!("{p}.offset_depth"), &l.offset_depth);
                    f(&format!("{p}.offset_depth_bias"), &l.offset_depth_bias);
                    f(&format!("{p}.offset_point"), &l.offset_point);
                    f(&format!("{p}.offset_point_bias"), &l.offset_point_bias);
                    f(&format!("{p}.value_depth"), &l.value_depth);
                    f(&format!("{p}.value_point"), &l.value_point);
                    f(&format!("{p}.value_point_bias"), &l.value_point_bias);
                }
            }
            for (bi, stack) in st.blocks.iter().enumerate() {
                for (ki, b) in stack.iter().enumerate() {
                    let p = format!("stage{si}.branch{bi}.block{ki}");
                    f(&format!("{p}.norm1.gamma"), &b.norm1.gamma);
                    if let Some(beta) = &b.norm1.beta {
                        f(&format!("{p}.norm1.beta"), beta);
                    }
                    f(&format!("{p}.attn.qkv_point"), &b.attn.qkv_point);
                    f(&format!("{p}.attn.qkv_point_bias"), &b.attn.qkv_point_bias);
                    f(&format!("{p}.attn.qkv_depth"), &b.attn.qkv_depth);
                    f(&format!("{p}.attn.qkv_depth_bias"), &b.attn.qkv_depth_bias);
                    f(&format!("{p}.attn.out_point"), &b.attn.out_point);
                    f(&format!("{p}.attn.out_bias"), &b.attn.out_bias);
                    for (gi, g) in b.attn.cpe.groups.iter().enumerate() {
                        f(&format!("{p}.attn.cpe{gi}"), &g.weights);
                    }
                    f(&format!("{p}.attn.s"), &b.attn.s);
                    f(&format!("{p}.norm2.gamma"), &b.norm2.gamma);
                    if let Some(beta) = &b.norm2.beta {
                        f(&format!("{p}.norm2.beta"), beta);
                    }
                    f(&format!("{p}.ffn.point3"), &b.ffn.point3);
                    f(&format!("{p}.ffn.point3_bias"), &b.ffn.point3_bias);
                    f(&format!("{p}.ffn.point5"), &b.ffn.point5);
                    f(&format!("{p}.ffn.point5_bias"), &b.ffn.point5_bias);
                    f(&format!("{p}.ffn.depth3"), &b.ffn.depth3);
                    f(&format!("{p}.ffn.depth5"), &b.ffn.depth5);
                    skff_params(&format!("{p}.ffn.skff"), &b.ffn.skff, f);
                }
            }
            skff_params(&format!("stage{si}.skff"), &st.skff, f);
        }
        for (i, u) in self.ups.iter().enumerate() {
            f(&format!("up{i}.weight"), &u.weight);
            f(&format!("up{i}.bias"), &u.bias);
        }
        for (i, s) in self.skip_reduce.iter().enumerate() {
            f(&format!("skip_reduce{i}.weight"), &s.weight);
            f(&format!("skip_reduce{i}.bias"), &s.bias);
        }
        f("final.weight", &self.final_conv.weight);
        f("final.bias", &self.final_conv.bias);
    }

    /// Mutable visit, same order as [`for_each_param`].
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("stem.weight", &mut self.stem.weight);
        f("stem.bias", &mut self.stem.bias);
        for (si, st) in self.stages.iter_mut().enumerate() {
            for (bi, stack) in st.embed.iter_mut().enumerate() {
                for (li, l) in stack.iter_mut().enumerate() {
                    let p = format!("stage{si}.branch{bi}.embed{li}");
                    f(&format!("{p}.offset_depth"), &mut l.offset_depth);
                    f(&format!("{p}.offset_depth_bias"), &mut l.offset_depth_bias);
                    f(&format!("{p}.offset_point"), &mut l.offset_point);
                    f(&format!("{p}.offset_point_bias"), &mut l.offset_point_bias);
                    f(&format!("{p}.value_depth"), &mut l.value_depth);
                    f(&format!("{p}.value_point"), &mut l.value_point);
                    f(&format!("{p}.value_point_bias"), &mut l.value_point_bias);
                }
            }
            for (bi, stack) in st.blocks.iter_mut().enumerate() {
                for (ki, b) in stack.iter_mut().enumerate() {
                    let p = format!("stage{si}.branch{bi}.block{ki}");
                    f(&format!("{p}.norm1.gamma"), &mut b.norm1.gamma);
                    if let Some(beta) = &mut b.norm1.beta {
                        f(&format!("{p}.norm1.beta"), beta);
                    }
                    f(&format!("{p}.attn.qkv_point"), &mut b.attn.qkv_point);
                    f(&format!("{p}.attn.qkv_point_bias"), &mut b.attn.qkv_point_bias);
                    f(&format!("{p}.attn.qkv_depth"), &mut b.attn.qkv_depth);
                    f(&format!("{p}.attn.qkv_depth_bias"), &mut b.attn.qkv_depth_bias);
                    f(&format!("{p}.attn.out_point"), &mut b.attn.out_point);
                    f(&format!("{p}.attn.out_bias"), &mut b.attn.out_bias);
                    for (gi, g) in b.attn.cpe.groups.iter_mut().enumerate() {
                        f(&format!("{p}.attn.cpe{gi}"), &mut g.weights);
                    }
                    f(&format!("{p}.attn.s"), &mut b.attn.s);
                    f(&format!("{p}.norm2.gamma"), &mut b.norm2.gamma);
                    if let Some(beta) = &mut b.norm2.beta {
                        f(&format!("{p}.norm2.beta"), beta);
                    }
                    f(&format!("{p}.ffn.point3"), &mut b.ffn.point3);
                    f(&format!("{p}.ffn.point3_bias"), &mut b.ffn.point3_bias);
                    f(&format!("{p}.ffn.point5"), &mut b.ffn.point5);
                    f(&format!("{p}.ffn.point5_bias"), &mut b.ffn.point5_bias);
                    f(&format!("{p}.ffn.depth3"), &mut b.ffn.depth3);
                    f(&format!("{p}.ffn.depth5"), &mut b.ffn.depth5);
                    skff_params_mut(&format!("{p}.ffn.skff"), &mut b.ffn.skff, f);
                }
            }
            skff_params_mut(&format!("stage{si}.skff"), &mut st.skff, f);
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            f(&format!("up{i}.weight"), &mut u.weight);
            f(&format!("up{i}.bias"), &mut u.bias);
        }
        for (i, s) in self.skip_reduce.iter_mut().enumerate() {
            f(&format!("skip_reduce{i}.weight"), &mut s.weight);
            f(&format!("skip_reduce{i}.bias"), &mut s.bias);
        }
        f("final.weight", &mut self.final_conv.weight);
        f("final.bias", &mut self.final_conv.bias);
    }

    pub fn param_count(&self) -> u64 {
        let mut total = 0u64;
        self.for_each_param(&mut |_, t| total += t.len() as u64);
        total
    }

    /// Save as a manifest + raw tensor container (single file, atomic).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = String::from("TAYLIN-CKPT1\n");
        let mut payload = Vec::new();
        self.for_each_param(&mut |name, t| {
            let shape =
                t.shape().iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",");
            let _ = writeln!(manifest, "param {name} {shape}");
            payload.extend_from_slice(&tensor_to_bytes(t));
        });
        manifest.push_str("end\n");
        let mut bytes = manifest.into_bytes();
        bytes.extend_from_slice(&payload);
        write_atomic(path, &bytes)
    }

    /// Load a checkpoint saved by [`save`]; the config must produce the
    /// same parameter walk (names and shapes are verified).
    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<ModelWeights> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let header_end = find_subslice(&bytes, b"end\n")
            .ok_or_else(|| Error::Parse("checkpoint: missing manifest terminator".into()))?;
        let manifest = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::Parse("checkpoint: manifest is not UTF-8".into()))?;
        let mut lines = manifest.lines();
        if lines.next() != Some("TAYLIN-CKPT1") {
            return Err(Error::Parse("checkpoint: bad magic".into()));
        }
        let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
        for line in lines {
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some("param"), Some(name), Some(shape)) => {
                    let dims: Vec<usize> = shape
                        .split(',')
                        .map(|t| t.parse().map_err(|_| Error::Parse("checkpoint: bad shape".into())))
                        .collect::<Result<_>>()?;
                    entries.push((name.to_string(), dims));
                }
                _ => return Err(Error::Parse(format!("checkpoint: bad manifest line '{line}'"))),
            }
        }
        let mut pos = header_end + 4;
        let mut tensors: Vec<Tensor> = Vec::with_capacity(entries.len());
        for (name, dims) in &entries {
            let (t, used) = tensor_from_bytes(&bytes[pos..])
                .map_err(|e| Error::Parse(format!("checkpoint param {name}: {e}")))?;
            if t.shape() != &dims[..] {
                return Err(Error::Parse(format!(
                    "checkpoint param {name}: manifest says {dims:?}, payload has {:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
            pos += used;
        }
        if pos != bytes.len() {
            return Err(Error::Parse("checkpoint: trailing bytes".into()));
        }
        // materialize a skeleton from the config, then overwrite in order
        let mut model = ModelWeights::init(cfg, &mut Rng::new(0))?;
        let mut idx = 0usize;
        let mut err: Option<Error> = None;
        model.for_each_param_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            if idx >= entries.len() {
                err = Some(Error::Parse("checkpoint: too few parameters".into()));
                return;
            }
            let (ename, _) = &entries[idx];
            if ename != name {
                err = Some(Error::Parse(format!(
                    "checkpoint: parameter order mismatch, expected {name}, found {ename}"
                )));
                return;
            }
            if tensors[idx].shape() != t.shape() {
                err = Some(Error::Parse(format!("checkpoint: shape mismatch at {name}")));
                return;
            }
            *t = tensors[idx].clone();
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != entries.len() {
            return Err(Error::Parse("checkpoint: too many parameters".into()));
        }
        Ok(model)
    }
}

fn skff_params(prefix: &str, w: &SkffWeights, f: &mut dyn FnMut(&str, &Tensor)) {
    f(&format!("{prefix}.squeeze"), &w.squeeze);
    f(&format!("{prefix}.squeeze_bias"), &w.squeeze_bias);
    for (i, e) in w.expand.iter().enumerate() {
        f(&format!("{prefix}.expand{i}"), e);
        f(&format!("{prefix}.expand{i}_bias"), &w.expand_bias[i]);
    }
}

fn skff_params_mut(prefix: &str, w: &mut SkffWeights, f: &mut dyn FnMut(&str, &mut Tensor)) {
    f(&format!("{prefix}.squeeze"), &mut w.squeeze);
    f(&format!("{prefix}.squeeze_bias"), &mut w.squeeze_bias);
    for (i, (e, b)) in w.expand.iter_mut().zip(w.expand_bias.iter_mut()).enumerate() {
        f(&format!("{prefix}.expand{i}"), e);
        f(&format!("{prefix}.expand{i}_bias"), b);
    }
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// One stage: embed into branches, run each branch's block stack, fuse.
/// With `threads > 1` the branches evaluate concurrently; results are
/// written by branch index, so evaluation order cannot affect the output.
pub fn stage_forward(
    x: &Tensor,
    sw: &StageWeights,
    cfg: &ModelConfig,
    stage: usize,
    threads: usize,
) -> Result<Tensor> {
    let branch_cfgs = stage_branch_cfgs(cfg, stage);
    let feats = multi_scale_patch_embed(x, &branch_cfgs, &sw.embed)?;
    let acfg = cfg.attention_config(stage);
    let run_branch = |b: usize, feat: &Tensor| -> Result<Tensor> {
        let mut cur = feat.clone();
        for blk in &sw.blocks[b] {
            cur = transformer_block(&cur, blk, &acfg)?;
        }
        Ok(cur)
    };
    let processed: Vec<Result<Tensor>> = if threads > 1 && feats.len() > 1 {
        let run_branch = &run_branch;
        std::thread::scope(|scope| {
            let handles: Vec<_> = feats
                .iter()
                .enumerate()
                .map(|(b, feat)| scope.spawn(move || run_branch(b, feat)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("branch thread panicked")).collect()
        })
    } else {
        feats.iter().enumerate().map(|(b, feat)| run_branch(b, feat)).collect()
    };
    let processed: Vec<Tensor> = processed.into_iter().collect::<Result<_>>()?;
    skff_fuse(&processed, &sw.skff)
}

/// Full restoration forward pass: returns `input + R` with the same shape
/// as the input. Spatial extents must be divisible by 8.
pub fn backbone_forward(
    image: &Tensor,
    weights: &ModelWeights,
    cfg: &ModelConfig,
    threads: usize,
) -> Result<Tensor> {
    cfg.validate()?;
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::Shape("backbone: input must be 3×h×w".into()));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Shape(format!("backbone: {h}x{w} not divisible by 8")));
    }
    image.ensure_finite("backbone input")?;

    let stem = dense_conv(image, &weights.stem.weight, Some(&weights.stem.bias))?;
    // encoder
    let e1 = stage_forward(&stem, &weights.stages[0], cfg, 0, threads)?;
    let e2 = stage_forward(&pixel_unshuffle(&e1, 2)?, &weights.stages[1], cfg, 1, threads)?;
    let e3 = stage_forward(&pixel_unshuffle(&e2, 2)?, &weights.stages[2], cfg, 2, threads)?;
    let e4 = stage_forward(&pixel_unshuffle(&e3, 2)?, &weights.stages[3], cfg, 3, threads)?;
    // decoder with skips
    let up = |x: &Tensor, pw: &PointwiseWeights| -> Result<Tensor> {
        pixel_shuffle(&pointwise(x, &pw.weight, Some(&pw.bias))?, 2)
    };
    let concat = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        if a.shape()[1..] != b.shape()[1..] {
            return Err(Error::Shape("backbone: skip spatial mismatch".into()));
        }
        let (ca, cb) = (a.shape()[0], b.shape()[0]);
        let mut out = Tensor::zeros(&[ca + cb, a.shape()[1], a.shape()[2]]);
        let hw = a.shape()[1] * a.shape()[2];
        out.data_mut()[..ca * hw].copy_from_slice(a.data());
        out.data_mut()[ca * hw..].copy_from_slice(b.data());
        Ok(out)
    };
    let d5_in = pointwise(
        &concat(&up(&e4, &weights.ups[0])?, &e3)?,
        &weights.skip_reduce[0].weight,
        Some(&weights.skip_reduce[0].bias),
    )?;
    let d5 = stage_forward(&d5_in, &weights.stages[4], cfg, 4, threads)?;
    let d6_in = pointwise(
        &concat(&up(&d5, &weights.ups[1])?, &e2)?,
        &weights.skip_reduce[1].weight,
        Some(&weights.skip_reduce[1].bias),
    )?;
    let d6 = stage_forward(&d6_in, &weights.stages[5], cfg, 5, threads)?;
    // first-stage skip: concatenate without reduction
    let d7_in = concat(&up(&d6, &weights.ups[2])?, &e1)?;
    let d7 = stage_forward(&d7_in, &weights.stages[6], cfg, 6, threads)?;
    // refinement
    let r8 = stage_forward(&d7, &weights.stages[7], cfg, 7, threads)?;
    let residual = dense_conv(&r8, &weights.final_conv.weight, Some(&weights.final_conv.bias))?;
    let out = image.add(&residual)?;
    out.ensure_finite("backbone output")?;
    Ok(out)
}

/// Exact parameter count of a configuration.
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(ModelWeights::init(cfg, &mut Rng::new(0))?.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skff_identical_branches_pass_through() {
        let mut rng = Rng::new(40);
        let f = rng.normal_tensor(&[6, 5, 5]);
        let w = SkffWeights::init(6, 2, &mut rng, 0.3);
        let fused = skff_fuse(&[f.clone(), f.clone()], &w).unwrap();
        assert!(fused.max_abs_diff(&f).unwrap() < 1e-12);
    }

    #[test]
    fn skff_saturated_logits_select_branch_zero() {
        let mut rng = Rng::new(41);
        let a = rng.normal_tensor(&[4, 3, 3]);
        let b = rng.normal_tensor(&[4, 3, 3]);
        let mut w = SkffWeights::zeros(4, 2);
        w.expand_bias[0] = Tensor::filled(&[4], 50.0);
        let fused = skff_fuse(&[a.clone(), b], &w).unwrap();
        assert!(fused.max_abs_diff(&a).unwrap() < 1e-12);
    }

    #[test]
    fn skff_matches_hand_rolled_reference() {
        let mut rng = Rng::new(42);
        let a = rng.normal_tensor(&[8, 4, 4]);
        let b = rng.normal_tensor(&[8, 4, 4]);
        let w = SkffWeights::init(8, 2, &mut rng, 0.5);
        let got = skff_fuse(&[a.clone(), b.clone()], &w).unwrap();

        // independent composition of the same definition
        let c = 8;
        let r = SkffWeights::reduced_dim(c);
        let hw = 16.0;
        let mut pooled = vec![0.0; c];
        for ch in 0..c {
            pooled[ch] = (a.plane(ch).iter().sum::<f64>() + b.plane(ch).iter().sum::<f64>()) / hw;
        }
        let mut desc = vec![0.0; r];
        for i in 0..r {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += w.squeeze.at2(i, ch) * pooled[ch];
            }
            desc[i] = acc.max(0.0);
        }
        let mut want = Tensor::zeros(&[8, 4, 4]);
        for ch in 0..c {
            let l0: f64 = (0..r).map(|i| w.expand[0].at2(ch, i) * desc[i]).sum();
            let l1: f64 = (0..r).map(|i| w.expand[1].at2(ch, i) * desc[i]).sum();
            let e0 = l0.exp();
            let e1 = l1.exp();
            let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            for y in 0..4 {
                for x in 0..4 {
                    want.set3(ch, y, x, a0 * a.at3(ch, y, x) + a1 * b.at3(ch, y, x));
                }
            }
        }
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn skff_output_is_convex_combination() {
        let mut rng = Rng::new(43);
        let a = rng.normal_tensor(&[4, 2, 2]);
        let b = rng.normal_tensor(&[4, 2, 2]);
        let w = SkffWeights::init(4, 2, &mut rng, 1.0);
        let fused = skff_fuse(&[a.clone(), b.clone()], &w).unwrap();
        for i in 0..fused.len() {
            let lo = a.data()[i].min(b.data()[i]) - 1e-12;
            let hi = a.data()[i].max(b.data()[i]) + 1e-12;
            assert!(fused.data()[i] >= lo && fused.data()[i] <= hi);
        }
    }

    #[test]
    fn pixel_unshuffle_ordering_and_inverse() {
        // 1×4×4 ramp, r=2: documented sub-pixel ordering
        let data: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let x = Tensor::new(&[1, 4, 4], data).unwrap();
        let u = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(u.shape(), &[4, 2, 2]);
        // channel 0 holds (dy=0, dx=0) sub-pixels: 0, 2, 8, 10
        assert_eq!(u.plane(0), &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(u.plane(1), &[1.0, 3.0, 9.0, 11.0]);
        assert_eq!(u.plane(2), &[4.0, 6.0, 12.0, 14.0]);
        assert_eq!(u.plane(3), &[5.0, 7.0, 13.0, 15.0]);

        let mut rng = Rng::new(44);
        let t = rng.normal_tensor(&[3, 8, 6]);
        let round = pixel_shuffle(&pixel_unshuffle(&t, 2).unwrap(), 2).unwrap();
        assert_eq!(round, t); // bit-exact inverse

        assert_eq!(pixel_unshuffle(&t, 1).unwrap(), t);
        assert!(pixel_unshuffle(&t, 4).is_err());
    }

    #[test]
    fn layer_norm_is_channelwise() {
        let mut rng = Rng::new(45);
        let x = rng.normal_tensor(&[6, 3, 3]);
        let w = NormWeights::init(6, false);
        let out = layer_norm(&x, &w).unwrap();
        for y in 0..3 {
            for xx in 0..3 {
                let mean: f64 = (0..6).map(|c| out.at3(c, y, xx)).sum::<f64>() / 6.0;
                assert!(mean.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transformer_block_zero_weights_is_identity() {
        let cfg = ModelConfig::nano();
        let acfg = cfg.attention_config(0);
        let mut rng = Rng::new(46);
        let mut w = TransformerBlockWeights::init(8, &acfg, false, &mut rng, 0.02).unwrap();
        // zero the residual branches' output layers
        w.attn.out_point = Tensor::zeros(&[8, 8]);
        w.attn.out_bias = Tensor::zeros(&[8]);
        w.ffn.point3 = Tensor::zeros(&[8, 8]);
        w.ffn.point5 = Tensor::zeros(&[8, 8]);
        w.ffn.depth3 = Tensor::zeros(&[8, 3, 3]);
        w.ffn.depth5 = Tensor::zeros(&[8, 5, 5]);
        let x = rng.normal_tensor(&[8, 4, 4]);
        let out = transformer_block(&x, &w, &acfg).unwrap();
        assert!(out.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn transformer_block_is_stable_at_init_scale() {
        let mut rng = Rng::new(47);
        let cfg = ModelConfig::nano();
        let acfg = AttentionConfig { heads: 2, head_dim: 8, ..cfg.attention_config(0) };
        let w = TransformerBlockWeights::init(16, &acfg, false, &mut rng, 0.02).unwrap();
        let x = rng.normal_tensor(&[16, 8, 8]);
        let out = transformer_block(&x, &w, &acfg).unwrap();
        assert!(out.frob_norm() <= 10.0 * x.frob_norm());
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = ModelConfig::variant_b();
        let text = cfg.to_text();
        let back = ModelConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(ModelConfig::from_text("nonsense").is_err());
        assert!(ModelConfig::from_text("branches = 1,2\n").is_err());
    }

    #[test]
    fn head_selection_divides_width() {
        for cfg in [ModelConfig::nano(), ModelConfig::variant_b(), ModelConfig::variant_l(), ModelConfig::variant_xl()] {
            cfg.validate().unwrap();
            for stage in 0..8 {
                assert_eq!(cfg.channels[stage] % cfg.heads(stage), 0);
            }
        }
        let b = ModelConfig::variant_b();
        assert_eq!((0..8).map(|s| b.heads(s)).collect::<Vec<_>>(), vec![1, 2, 3, 4, 3, 2, 1, 1]);
    }

    #[test]
    fn count_params_single_pointwise() {
        // 1×1 conv with bias, 2 in, 3 out: 9 parameters
        let w = PointwiseWeights::init(2, 3, &mut Rng::new(0), 0.02);
        assert_eq!(w.weight.len() + w.bias.len(), 9);
    }
}
