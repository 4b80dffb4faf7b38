//! Multi-scale patch embedding from depthwise separable and deformable
//! convolutions.
//!
//! Each layer predicts one shared offset field (two maps per kernel tap)
//! from a depthwise + pointwise head, hard-clamps the offsets to
//! `[-bound, bound]`, samples the input bilinearly at
//! `grid + kernel tap + offset` per channel, and mixes channels with a
//! pointwise convolution. With the default kernel 3 and bound 3 a single
//! layer's receptive field is confined to a 9×9 window — the clamp makes
//! that exact, not approximate.
//!
//! Branches stack this layer to different depths (1, 2, 3 …), so parallel
//! branches produce tokens of increasing receptive field and semantic
//! depth. Every layer is followed by a hard-swish activation.

use crate::conv::{depthwise, pointwise};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Configuration of one embedding branch.
#[derive(Debug, Clone)]
pub struct DeformableEmbedConfig {
    /// Odd deformable kernel size K.
    pub kernel: usize,
    /// Number of stacked layers in this branch.
    pub stack_depth: usize,
    /// Hard truncation bound B for the learned offsets.
    pub offset_bound: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Stride of the first layer (1 or 2); later layers are stride 1.
    pub stride: usize,
}

impl DeformableEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("embedding: kernel must be odd, got {}", self.kernel)));
        }
        if self.stack_depth == 0 {
            return Err(Error::Config("embedding: stack depth must be positive".into()));
        }
        if !(self.offset_bound >= 0.0) {
            return Err(Error::Config("embedding: offset bound must be >= 0".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("embedding: channel counts must be positive".into()));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Config(format!("embedding: stride must be 1 or 2, got {}", self.stride)));
        }
        Ok(())
    }

    /// Default branch family: depths 1, 2, 3, … so receptive fields tile
    /// increasing ranges.
    pub fn branch_family(
        num_branches: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        offset_bound: f64,
        stride: usize,
    ) -> Vec<DeformableEmbedConfig> {
        (0..num_branches)
            .map(|b| DeformableEmbedConfig {
                kernel,
                stack_depth: b + 1,
                offset_bound,
                in_channels,
                out_channels,
                stride,
            })
            .collect()
    }
}

/// Weights of one deformable layer.
#[derive(Debug, Clone)]
pub struct DsdcnWeights {
    /// `[C_in × K × K]` depthwise stage of the offset head.
    pub offset_depth: Tensor,
    pub offset_depth_bias: Tensor,
    /// `[2K² × C_in]` pointwise stage emitting (Δy, Δx) per kernel tap.
    pub offset_point: Tensor,
    pub offset_point_bias: Tensor,
    /// `[C_in × K × K]` depthwise deformable value kernel.
    pub value_depth: Tensor,
    /// `[C_out × C_in]` pointwise channel mixer.
    pub value_point: Tensor,
    pub value_point_bias: Tensor,
}

impl DsdcnWeights {
    /// All-zero weights: the offset head emits zero, so the layer is a
    /// plain (zero) separable convolution.
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize) -> DsdcnWeights {
        let taps = 2 * kernel * kernel;
        DsdcnWeights {
            offset_depth: Tensor::zeros(&[c_in, kernel, kernel]),
            offset_depth_bias: Tensor::zeros(&[c_in]),
            offset_point: Tensor::zeros(&[taps, c_in]),
            offset_point_bias: Tensor::zeros(&[taps]),
            value_depth: Tensor::zeros(&[c_in, kernel, kernel]),
            value_point: Tensor::zeros(&[c_out, c_in]),
            value_point_bias: Tensor::zeros(&[c_out]),
        }
    }

    /// Standard initialization: value path truncated-normal at `scale`,
    /// offset head zeroed so training starts from the plain separable conv.
    pub fn init(c_in: usize, c_out: usize, kernel: usize, rng: &mut Rng, scale: f64) -> DsdcnWeights {
        let mut w = DsdcnWeights::zeros(c_in, c_out, kernel);
        w.value_depth = rng.trunc_normal_tensor(&[c_in, kernel, kernel], scale);
        w.value_point = rng.trunc_normal_tensor(&[c_out, c_in], scale);
        w
    }

    /// Channel-identity layer (requires `c_in == c_out`): delta value
    /// kernel, identity mixer, zero offsets.
    pub fn channel_identity(c: usize, kernel: usize) -> DsdcnWeights {
        let mut w = DsdcnWeights::zeros(c, c, kernel);
        for ch in 0..c {
            w.value_depth.set3(ch, kernel / 2, kernel / 2, 1.0);
        }
        w.value_point = Tensor::identity(c);
        w
    }

    fn check(&self, cfg: &DeformableEmbedConfig) -> Result<()> {
        let (c_in, k) = (cfg.in_channels, cfg.kernel);
        let taps = 2 * k * k;
        if self.offset_depth.shape() != [c_in, k, k]
            || self.offset_point.shape() != [taps, c_in]
            || self.value_depth.shape() != [c_in, k, k]
            || self.value_point.shape() != [cfg.out_channels, c_in]
        {
            return Err(Error::Shape("dsdcn: weight shapes do not match config".into()));
        }
        Ok(())
    }
}

/// Sampling statistics recorded by the instrumented forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct DsdcnTrace {
    /// Largest |Δy| or |Δx| actually used after clamping.
    pub max_abs_offset: f64,
    /// Largest displacement of any bilinear sample from its tap position.
    pub max_displacement: f64,
}

fn dsdcn_forward_inner(
    x: &Tensor,
    w: &DsdcnWeights,
    cfg: &DeformableEmbedConfig,
    mut trace: Option<&mut DsdcnTrace>,
) -> Result<Tensor> {
    cfg.validate()?;
    w.check(cfg)?;
    if x.rank() != 3 || x.shape()[0] != cfg.in_channels {
        return Err(Error::Shape(format!(
            "dsdcn: input {:?} does not match {} channels",
            x.shape(),
            cfg.in_channels
        )));
    }
    x.ensure_finite("dsdcn input")?;
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = cfg.kernel;
    let pad = k / 2;
    let stride = cfg.stride;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;

    // offset head on the output grid, then hard truncation
    let od = depthwise(x, &w.offset_depth, Some(&w.offset_depth_bias), stride)?;
    let mut offsets = pointwise(&od, &w.offset_point, Some(&w.offset_point_bias))?;
    let bound = cfg.offset_bound;
    for v in offsets.data_mut() {
        *v = v.clamp(-bound, bound);
    }
    if let Some(tr) = trace.as_deref_mut() {
        tr.max_abs_offset = offsets.data().iter().fold(0.0, |m, v| m.max(v.abs()));
    }

    // depthwise deformable sampling
    let mut dep = Tensor::zeros(&[c_in, oh, ow]);
    for oy in 0..oh {
        for ox in 0..ow {
            for tap_y in 0..k {
                for tap_x in 0..k {
                    let tap = tap_y * k + tap_x;
                    let dy = offsets.at3(2 * tap, oy, ox);
                    let dx = offsets.at3(2 * tap + 1, oy, ox);
                    let y = (oy * stride + tap_y) as f64 - pad as f64 + dy;
                    let xx = (ox * stride + tap_x) as f64 - pad as f64 + dx;
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.max_displacement = tr.max_displacement.max(dy.abs()).max(dx.abs());
                    }
                    for c in 0..c_in {
                        let coeff = w.value_depth.at3(c, tap_y, tap_x);
                        if coeff == 0.0 {
                            continue;
                        }
                        let sample = x.bilinear_sample(y, xx, c)?;
                        dep.set3(c, oy, ox, dep.at3(c, oy, ox) + coeff * sample);
                    }
                }
            }
        }
    }

    let out = pointwise(&dep, &w.value_point, Some(&w.value_point_bias))?;
    out.ensure_finite("dsdcn output")?;
    Ok(out)
}

/// One deformable separable layer: offset head → clamp → deformable
/// depthwise sampling → pointwise mix. Zero padding at borders.
pub fn dsdcn_forward(x: &Tensor, w: &DsdcnWeights, cfg: &DeformableEmbedConfig) -> Result<Tensor> {
    dsdcn_forward_inner(x, w, cfg, None)
}

/// [`dsdcn_forward`] with sampling instrumentation.
pub fn dsdcn_forward_traced(
    x: &Tensor,
    w: &DsdcnWeights,
    cfg: &DeformableEmbedConfig,
) -> Result<(Tensor, DsdcnTrace)> {
    let mut trace = DsdcnTrace::default();
    let out = dsdcn_forward_inner(x, w, cfg, Some(&mut trace))?;
    Ok((out, trace))
}

/// Hard-swish activation `x · clamp(x + 3, 0, 6) / 6`, applied elementwise.
pub fn hardswish(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0).collect();
    Tensor::new(x.shape(), data).expect("hardswish preserves finiteness")
}

/// Per-branch layer configs derived from a branch config: the first layer
/// maps `in→out` at the branch stride, the rest are `out→out` stride 1.
fn layer_cfg(branch: &DeformableEmbedConfig, layer: usize) -> DeformableEmbedConfig {
    DeformableEmbedConfig {
        kernel: branch.kernel,
        stack_depth: 1,
        offset_bound: branch.offset_bound,
        in_channels: if layer == 0 { branch.in_channels } else { branch.out_channels },
        out_channels: branch.out_channels,
        stride: if layer == 0 { branch.stride } else { 1 },
    }
}

/// Initialize the weight stack for one branch.
pub fn init_branch_weights(branch: &DeformableEmbedConfig, rng: &mut Rng, scale: f64) -> Vec<DsdcnWeights> {
    (0..branch.stack_depth)
        .map(|l| {
            let lc = layer_cfg(branch, l);
            DsdcnWeights::init(lc.in_channels, lc.out_channels, lc.kernel, rng, scale)
        })
        .collect()
}

/// Multi-scale patch embedding: branch `i` applies its stack of deformable
/// layers (each followed by hard-swish). All branch outputs must share the
/// same spatial size.
pub fn multi_scale_patch_embed(
    x: &Tensor,
    branch_cfgs: &[DeformableEmbedConfig],
    weights: &[Vec<DsdcnWeights>],
) -> Result<Vec<Tensor>> {
    if branch_cfgs.is_empty() {
        return Err(Error::Config("patch embed: need at least one branch".into()));
    }
    if weights.len() != branch_cfgs.len() {
        return Err(Error::Shape("patch embed: weights per branch mismatch".into()));
    }
    for pair in branch_cfgs.windows(2) {
        if pair[1].stack_depth <= pair[0].stack_depth {
            return Err(Error::Config(
                "patch embed: stack depths must be strictly increasing across branches".into(),
            ));
        }
    }
    let mut outs = Vec::with_capacity(branch_cfgs.len());
    for (branch, stack) in branch_cfgs.iter().zip(weights) {
        if stack.len() != branch.stack_depth {
            return Err(Error::Shape(format!(
                "patch embed: branch expects {} layers, got {}",
                branch.stack_depth,
                stack.len()
            )));
        }
        let mut feat = x.clone();
        for (l, w) in stack.iter().enumerate() {
            feat = dsdcn_forward(&feat, w, &layer_cfg(branch, l))?;
            feat = hardswish(&feat);
        }
        outs.push(feat);
    }
    let spatial = (outs[0].shape()[1], outs[0].shape()[2]);
    for o in &outs {
        if (o.shape()[1], o.shape()[2]) != spatial {
            return Err(Error::Shape("patch embed: branch output spatial sizes differ".into()));
        }
    }
    Ok(outs)
}

fn checked_sum_of_products(ctx: &str, terms: &[&[u128]]) -> Result<u64> {
    let overflow = || Error::Guard(format!("{ctx}: overflow"));
    let mut total = 0u128;
    for factors in terms {
        let p = factors
            .iter()
            .try_fold(1u128, |acc, &f| acc.checked_mul(f).ok_or_else(overflow))?;
        total = total.checked_add(p).ok_or_else(overflow)?;
    }
    u64::try_from(total).map_err(|_| overflow())
}

/// Multiply-accumulate count of a standard deformable convolution layer:
/// `2DK⁴hw + D²K²hw + 4DK²hw`.
pub fn dcn_macs(cfg: &DeformableEmbedConfig, h: usize, w: usize) -> Result<u64> {
    cfg.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::Config("dcn_macs: h and w must be positive".into()));
    }
    let d = cfg.in_channels as u128;
    let k2 = (cfg.kernel * cfg.kernel) as u128;
    let hw = (h as u128) * (w as u128);
    checked_sum_of_products(
        "dcn_macs",
        &[&[2, d, k2, k2, hw], &[d, d, k2, hw], &[4, d, k2, hw]],
    )
}

/// Multiply-accumulate count of the separable deformable layer:
/// `8DK²hw + D²hw`.
pub fn dsdcn_macs(cfg: &DeformableEmbedConfig, h: usize, w: usize) -> Result<u64> {
    cfg.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::Config("dsdcn_macs: h and w must be positive".into()));
    }
    let d = cfg.in_channels as u128;
    let k2 = (cfg.kernel * cfg.kernel) as u128;
    let hw = (h as u128) * (w as u128);
    checked_sum_of_products("dsdcn_macs", &[&[8, d, k2, hw], &[d, d, hw]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c_in: usize, c_out: usize, stride: usize) -> DeformableEmbedConfig {
        DeformableEmbedConfig {
            kernel: 3,
            stack_depth: 1,
            offset_bound: 3.0,
            in_channels: c_in,
            out_channels: c_out,
            stride,
        }
    }

    /// Plain depthwise-separable convolution, written independently as the
    /// zero-offset oracle.
    fn separable_reference(x: &Tensor, w: &DsdcnWeights, stride: usize) -> Tensor {
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let c_out = w.value_point.shape()[0];
        let k = w.value_depth.shape()[1];
        let pad = k / 2;
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[c_out, oh, ow]);
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = w.value_point_bias.data()[o];
                    for c in 0..c_in {
                        let mut dep = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if y < 0 || y >= h as isize || xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                dep += w.value_depth.at3(c, ky, kx)
                                    * x.at3(c, y as usize, xx as usize);
                            }
                        }
                        acc += w.value_point.at2(o, c) * dep;
                    }
                    out.set3(o, oy, ox, acc);
                }
            }
        }
        out
    }

    #[test]
    fn zero_offsets_reduce_to_separable_conv() {
        let mut rng = Rng::new(30);
        let x = rng.normal_tensor(&[4, 9, 7]);
        let mut w = DsdcnWeights::init(4, 6, 3, &mut rng, 0.5);
        w.value_point_bias = rng.normal_tensor(&[6]);
        for stride in [1, 2] {
            let got = dsdcn_forward(&x, &w, &cfg(4, 6, stride)).unwrap();
            let want = separable_reference(&x, &w, stride);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-10, "stride {stride}");
        }
    }

    #[test]
    fn constant_input_kernel_summing_to_one_is_constant_interior() {
        let x = Tensor::filled(&[1, 8, 8], 2.5);
        let mut w = DsdcnWeights::zeros(1, 1, 3);
        // value kernel averaging the 9 taps
        w.value_depth = Tensor::filled(&[1, 3, 3], 1.0 / 9.0);
        w.value_point = Tensor::identity(1);
        let out = dsdcn_forward(&x, &w, &cfg(1, 1, 1)).unwrap();
        for y in 1..7 {
            for xx in 1..7 {
                assert!((out.at3(0, y, xx) - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn offsets_are_clamped_to_bound() {
        let mut rng = Rng::new(31);
        let x = rng.uniform_tensor(&[2, 8, 8], -1.0, 1.0);
        let mut w = DsdcnWeights::init(2, 2, 3, &mut rng, 0.5);
        // huge offset head bias pushes raw offsets far beyond [-10, 10]
        w.offset_point_bias = rng.uniform_tensor(&[18], -10.0, 10.0).scale(3.0);
        let (_, trace) = dsdcn_forward_traced(&x, &w, &cfg(2, 2, 1)).unwrap();
        assert!(trace.max_abs_offset <= 3.0);
        assert!(trace.max_displacement <= 3.0);
        assert!(trace.max_abs_offset > 2.9, "bias should saturate the clamp");
    }

    #[test]
    fn locality_window_is_exact_nine_by_nine() {
        // perturbing any pixel outside the 9×9 window around an output
        // pixel must leave it bit-identical
        let mut rng = Rng::new(32);
        let x = rng.normal_tensor(&[2, 17, 17]);
        let mut w = DsdcnWeights::init(2, 2, 3, &mut rng, 0.4);
        // spatially varying offsets that saturate the clamp in places
        w.offset_depth = rng.trunc_normal_tensor(&[2, 3, 3], 1.5);
        w.offset_point = rng.trunc_normal_tensor(&[18, 2], 2.0);
        w.offset_point_bias = rng.uniform_tensor(&[18], -4.0, 4.0);
        let c = cfg(2, 2, 1);
        let base = dsdcn_forward(&x, &w, &c).unwrap();
        let center = 8usize;
        for (py, px) in [(0usize, 0usize), (0, 16), (16, 0), (16, 16), (3, 8), (8, 13)] {
            let cheb = (py as isize - center as isize)
                .abs()
                .max((px as isize - center as isize).abs());
            assert!(cheb > 4, "probe must be outside the window");
            let mut xp = x.clone();
            xp.set3(0, py, px, xp.at3(0, py, px) + 100.0);
            let out = dsdcn_forward(&xp, &w, &c).unwrap();
            assert_eq!(out.at3(0, center, center), base.at3(0, center, center));
            assert_eq!(out.at3(1, center, center), base.at3(1, center, center));
        }
        // sanity: some perturbation inside the window must change the output
        let mut any_changed = false;
        for (py, px) in [(center, center), (center + 2, center), (center, center + 2), (center - 1, center - 1), (center + 3, center + 3)] {
            let mut xp = x.clone();
            xp.set3(0, py, px, xp.at3(0, py, px) + 100.0);
            let out = dsdcn_forward(&xp, &w, &c).unwrap();
            if out.at3(0, center, center) != base.at3(0, center, center) {
                any_changed = true;
            }
        }
        assert!(any_changed, "in-window perturbations should reach the center");
    }

    #[test]
    fn branch_stack_shapes_and_depth_identity() {
        let mut rng = Rng::new(33);
        let x = rng.normal_tensor(&[24, 32, 32]);
        let cfgs = DeformableEmbedConfig::branch_family(3, 24, 12, 3, 3.0, 1);
        let weights: Vec<Vec<DsdcnWeights>> =
            cfgs.iter().map(|b| init_branch_weights(b, &mut rng, 0.02)).collect();
        let outs = multi_scale_patch_embed(&x, &cfgs, &weights).unwrap();
        assert_eq!(outs.len(), 3);
        for o in &outs {
            assert_eq!(o.shape(), &[12, 32, 32]);
        }
    }

    #[test]
    fn depth_two_delta_stack_is_double_activation() {
        let mut rng = Rng::new(34);
        let x = rng.normal_tensor(&[3, 6, 6]);
        let branch = DeformableEmbedConfig {
            kernel: 3,
            stack_depth: 2,
            offset_bound: 3.0,
            in_channels: 3,
            out_channels: 3,
            stride: 1,
        };
        let weights = vec![vec![
            DsdcnWeights::channel_identity(3, 3),
            DsdcnWeights::channel_identity(3, 3),
        ]];
        let outs = multi_scale_patch_embed(&x, std::slice::from_ref(&branch), &weights).unwrap();
        let want = hardswish(&hardswish(&x));
        assert!(outs[0].max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn stack_depths_must_increase() {
        let mut cfgs = DeformableEmbedConfig::branch_family(2, 4, 4, 3, 3.0, 1);
        cfgs[1].stack_depth = 1;
        let weights = vec![vec![DsdcnWeights::zeros(4, 4, 3)]; 2];
        let x = Tensor::zeros(&[4, 4, 4]);
        assert!(multi_scale_patch_embed(&x, &cfgs, &weights).is_err());
    }

    #[test]
    fn macs_formulas_match_hand_evaluation() {
        let c = DeformableEmbedConfig {
            kernel: 3,
            stack_depth: 1,
            offset_bound: 3.0,
            in_channels: 24,
            out_channels: 24,
            stride: 1,
        };
        assert_eq!(dsdcn_macs(&c, 8, 8).unwrap(), 147_456);
        assert_eq!(dcn_macs(&c, 8, 8).unwrap(), 635_904);
        let unit = DeformableEmbedConfig {
            kernel: 1,
            stack_depth: 1,
            offset_bound: 0.0,
            in_channels: 1,
            out_channels: 1,
            stride: 1,
        };
        assert_eq!(dsdcn_macs(&unit, 1, 1).unwrap(), 9);
        assert_eq!(dcn_macs(&unit, 1, 1).unwrap(), 7);
    }

    #[test]
    fn separable_cost_beats_deformable_cost() {
        for k in [3usize, 5, 7] {
            for d in [8usize, 16, 24, 48, 96] {
                let c = DeformableEmbedConfig {
                    kernel: k,
                    stack_depth: 1,
                    offset_bound: 3.0,
                    in_channels: d,
                    out_channels: d,
                    stride: 1,
                };
                assert!(dsdcn_macs(&c, 16, 16).unwrap() < dcn_macs(&c, 16, 16).unwrap());
            }
        }
    }
}
