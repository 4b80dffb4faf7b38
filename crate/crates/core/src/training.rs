//! Micro-scale gradient-descent demonstration.
//!
//! A single attention block (projections, linear kernel, positional
//! encoding, learnable modulation) is fit to a synthetic denoising task:
//! seeded low-frequency 2-D patterns corrupted by fresh Gaussian noise each
//! step. Everything is driven by the hand-derived analytic gradients; no
//! autodiff anywhere. The point is not restoration quality — it is proof
//! that the kernel and its gradients support learning at all.
//!
//! The recorded loss history is measured on a fixed seeded evaluation
//! batch after every step, so `lr = 0` yields a constant history even
//! though the training noise is regenerated per step.

use crate::attention::{
    col_slice, cpe, cpe_backward, from_tokens, tmsa_grad, tmsa_linear_diag, to_tokens,
    AttentionConfig, CpeWeights, QkvTriple,
};
use crate::conv::{depthwise, depthwise_backward, pointwise, pointwise_backward};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Internal width of the micro block.
pub const MICRO_CHANNELS: usize = 8;
/// Weight of the Fourier-magnitude term in the loss.
pub const FFT_LOSS_WEIGHT: f64 = 0.1;
/// Pinned default learning rate for the demonstration run.
pub const DEFAULT_LR: f64 = 0.4;
const DIVERGENCE_FACTOR: f64 = 1e3;

/// Synthetic denoising task: seeded low-frequency patterns plus Gaussian
/// noise at level `sigma`, regenerated from the stream every step.
#[derive(Debug, Clone)]
pub struct MicroTask {
    pub seed: u64,
    pub sigma: f64,
    pub patch: usize,
    pub batch: usize,
}

impl Default for MicroTask {
    fn default() -> Self {
        MicroTask { seed: 0, sigma: 0.1, patch: 16, batch: 4 }
    }
}

impl MicroTask {
    /// Low-frequency clean signal: a seeded sum of three sinusoids.
    pub fn clean_patch(&self, rng: &mut Rng) -> Tensor {
        let p = self.patch;
        let mut data = vec![0.0; p * p];
        for _ in 0..3 {
            let amp = rng.uniform(0.3, 1.0);
            let fy = rng.below(3) as f64;
            let fx = rng.below(3) as f64;
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            for y in 0..p {
                for x in 0..p {
                    let arg = std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / p as f64 + phase;
                    data[y * p + x] += amp * arg.sin();
                }
            }
        }
        Tensor::new(&[1, p, p], data).expect("finite signal")
    }

    fn noisy(&self, clean: &Tensor, rng: &mut Rng) -> Tensor {
        let noise = rng.normal_tensor(clean.shape()).scale(self.sigma);
        clean.add(&noise).expect("matching shapes")
    }
}

/// Trainable weights of the micro block.
#[derive(Debug, Clone)]
pub struct MicroBlockWeights {
    /// `[3C × 1]` lift from the single input channel to Q/K/V.
    pub qkv_point: Tensor,
    /// `[3C × 3 × 3]` depthwise refinement.
    pub qkv_depth: Tensor,
    /// `[1 × C]` projection back to one channel.
    pub out_point: Tensor,
    pub cpe: CpeWeights,
    /// Learnable modulation of the remainder term.
    pub s: f64,
}

impl MicroBlockWeights {
    pub fn init(rng: &mut Rng, init_s: f64) -> Result<MicroBlockWeights> {
        let c = MICRO_CHANNELS;
        // Q/K paths random; the V path starts as the exact identity
        // (unit lift + delta kernel) and the output projection at zero, so
        // the block begins as the identity map and the filter path stays
        // well conditioned for plain gradient descent.
        let mut qkv_point = rng.trunc_normal_tensor(&[3 * c, 1], 0.5);
        for ch in 2 * c..3 * c {
            qkv_point.data_mut()[ch] = 1.0;
        }
        let mut qkv_depth = rng.trunc_normal_tensor(&[3 * c, 3, 3], 0.2);
        for ch in 2 * c..3 * c {
            for ky in 0..3 {
                for kx in 0..3 {
                    qkv_depth.set3(ch, ky, kx, if ky == 1 && kx == 1 { 1.0 } else { 0.0 });
                }
            }
        }
        Ok(MicroBlockWeights {
            qkv_point,
            qkv_depth,
            out_point: Tensor::zeros(&[1, c]),
            cpe: CpeWeights::init(c, &[3, 5], rng, 0.1)?,
            s: init_s,
        })
    }

    fn attention_config(&self) -> AttentionConfig {
        AttentionConfig { modulation: self.s, ..AttentionConfig::for_dim(MICRO_CHANNELS) }
    }
}

/// Gradients matching [`MicroBlockWeights`] field for field.
#[derive(Debug, Clone)]
pub struct MicroBlockGrads {
    pub qkv_point: Tensor,
    pub qkv_depth: Tensor,
    pub out_point: Tensor,
    pub cpe: Vec<Tensor>,
    pub s: f64,
}

/// Intermediate activations retained for the backward pass.
pub struct ForwardCache {
    x: Tensor,       // input map [1×p×p]
    pw_out: Tensor,  // [3C×p×p]
    triple: QkvTriple,
    a_map: Tensor,   // attention + CPE, as a map [C×p×p]
}

/// Forward pass of the block: `pred = x + out(attn(x) + cpe(v))`.
pub fn micro_forward(x: &Tensor, w: &MicroBlockWeights) -> Result<(Tensor, ForwardCache)> {
    if x.rank() != 3 || x.shape()[0] != 1 {
        return Err(Error::Shape("micro block: input must be 1×p×p".into()));
    }
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let c = MICRO_CHANNELS;
    let pw_out = pointwise(x, &w.qkv_point, None)?;
    let dw_out = depthwise(&pw_out, &w.qkv_depth, None, 1)?;
    let tokens = to_tokens(&dw_out);
    let triple = QkvTriple::new(
        col_slice(&tokens, 0, c),
        col_slice(&tokens, c, c),
        col_slice(&tokens, 2 * c, c),
    )?;
    let cfg = w.attention_config();
    let (att, _) = tmsa_linear_diag(&triple, &cfg)?;
    let pos = cpe(&triple.v, h, wd, &w.cpe)?;
    let a = att.add(&pos)?;
    let a_map = from_tokens(&a, h, wd);
    let y = pointwise(&a_map, &w.out_point, None)?;
    let pred = x.add(&y)?;
    Ok((pred, ForwardCache { x: x.clone(), pw_out, triple, a_map }))
}

/// Backward pass: gradients of all block weights given `dL/dpred`.
pub fn micro_backward(
    w: &MicroBlockWeights,
    cache: &ForwardCache,
    dpred: &Tensor,
) -> Result<MicroBlockGrads> {
    let (h, wd) = (cache.x.shape()[1], cache.x.shape()[2]);
    let c = MICRO_CHANNELS;
    // residual head: dy = dpred
    let (da_map, d_out_point, _) = pointwise_backward(&cache.a_map, &w.out_point, dpred)?;
    let da = to_tokens(&da_map);
    let cfg = w.attention_config();
    let kg = tmsa_grad(&cache.triple, &cfg, &da)?;
    let (dv_cpe, d_cpe) = cpe_backward(&cache.triple.v, h, wd, &w.cpe, &da)?;
    let dv = kg.d_v.add(&dv_cpe)?;
    // reassemble the token gradient [dQ | dK | dV]
    let n = h * wd;
    let mut d_tokens = Tensor::zeros(&[n, 3 * c]);
    for i in 0..n {
        for j in 0..c {
            d_tokens.set2(i, j, kg.d_q.at2(i, j));
            d_tokens.set2(i, c + j, kg.d_k.at2(i, j));
            d_tokens.set2(i, 2 * c + j, dv.at2(i, j));
        }
    }
    let d_dw_map = from_tokens(&d_tokens, h, wd);
    let (d_pw_map, d_qkv_depth, _) = depthwise_backward(&cache.pw_out, &w.qkv_depth, &d_dw_map)?;
    let (_, d_qkv_point, _) = pointwise_backward(&cache.x, &w.qkv_point, &d_pw_map)?;
    Ok(MicroBlockGrads {
        qkv_point: d_qkv_point,
        qkv_depth: d_qkv_depth,
        out_point: d_out_point,
        cpe: d_cpe,
        s: kg.d_s,
    })
}

/// `L1 + λ·(mean absolute error of 2-D DFT magnitudes)`, λ = 0.1.
pub fn loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let (l, _) = loss_and_grad(pred, target, false)?;
    Ok(l)
}

/// Loss plus `dL/dpred`.
pub fn loss_backward(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let (l, g) = loss_and_grad(pred, target, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn loss_and_grad(pred: &Tensor, target: &Tensor, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "loss: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    let mut l1 = 0.0;
    let mut grad = if want_grad { Some(Tensor::zeros(pred.shape())) } else { None };
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let d = p - t;
        l1 += d.abs();
        if let Some(g) = &mut grad {
            g.data_mut()[i] = d.signum() / n; // signum(0) = 0 subgradient
        }
    }
    l1 /= n;

    // naive 2-D DFT magnitude spectra; the patch is small enough that the
    // direct O(N²) sum is the simplest correct choice
    let shape = pred.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = pred.len() / (h * w);
    let mut fft = 0.0;
    for plane in 0..planes {
        let off = plane * h * w;
        let pp = &pred.data()[off..off + h * w];
        let tp = &target.data()[off..off + h * w];
        let (pre, pim) = dft2(pp, h, w);
        let (tre, tim) = dft2(tp, h, w);
        for b in 0..h * w {
            let pm = (pre[b] * pre[b] + pim[b] * pim[b]).sqrt();
            let tm = (tre[b] * tre[b] + tim[b] * tim[b]).sqrt();
            fft += (pm - tm).abs();
            if let Some(g) = &mut grad {
                if pm > 0.0 {
                    let sign = (pm - tm).signum();
                    let coeff = FFT_LOSS_WEIGHT * sign / (n * pm);
                    let (u, v) = (b / w, b % w);
                    for y in 0..h {
                        for x in 0..w {
                            let ang = std::f64::consts::TAU
                                * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                            // d|P|/dp_yx = (Re·cos − Im·sin)/|P|
                            g.data_mut()[off + y * w + x] +=
                                coeff * (pre[b] * ang.cos() - pim[b] * ang.sin());
                        }
                    }
                }
            }
        }
    }
    fft /= n;
    Ok((l1 + FFT_LOSS_WEIGHT * fft, grad))
}

/// Direct 2-D DFT returning (real, imaginary) bins in row-major (u, v).
fn dft2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut r = 0.0;
            let mut i = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    let ang = std::f64::consts::TAU
                        * (u as f64 * y as f64 / h as f64 + v as f64 * xx as f64 / w as f64);
                    let val = x[y * w + xx];
                    r += val * ang.cos();
                    i -= val * ang.sin();
                }
            }
            re[u * w + v] = r;
            im[u * w + v] = i;
        }
    }
    (re, im)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub weights: MicroBlockWeights,
    /// Evaluation loss before any update.
    pub initial_loss: f64,
    /// Evaluation loss after each step (length == steps).
    pub loss_history: Vec<f64>,
    pub steps: usize,
}

impl TrainState {
    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(self.initial_loss)
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,eval_loss\n");
        s.push_str(&format!("0,{:.9e}\n", self.initial_loss));
        for (i, l) in self.loss_history.iter().enumerate() {
            s.push_str(&format!("{},{:.9e}\n", i + 1, l));
        }
        s
    }
}

fn eval_loss(w: &MicroBlockWeights, eval_set: &[(Tensor, Tensor)]) -> Result<f64> {
    let mut total = 0.0;
    for (noisy, clean) in eval_set {
        let (pred, _) = micro_forward(noisy, w)?;
        total += loss(&pred, clean)?;
    }
    Ok(total / eval_set.len() as f64)
}

/// Plain gradient descent (no momentum) on the block weights and the
/// modulation scalar. Deterministic given the task seed; aborts with a
/// diagnostic if the loss explodes past 1000× the initial value.
pub fn micro_train(task: &MicroTask, steps: usize, lr: f64) -> Result<TrainState> {
    if steps == 0 {
        return Err(Error::Config("micro_train: steps must be >= 1".into()));
    }
    if !(lr >= 0.0) {
        return Err(Error::Config("micro_train: lr must be >= 0".into()));
    }
    let mut weight_rng = Rng::new(task.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut data_rng = Rng::new(task.seed);
    let mut w = MicroBlockWeights::init(&mut weight_rng, 0.5)?;

    // fixed clean signals per batch slot; fixed evaluation noise
    let cleans: Vec<Tensor> = (0..task.batch).map(|_| task.clean_patch(&mut data_rng)).collect();
    let eval_set: Vec<(Tensor, Tensor)> =
        cleans.iter().map(|c| (task.noisy(c, &mut data_rng), c.clone())).collect();

    let initial_loss = eval_loss(&w, &eval_set)?;
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        // fresh training noise each step
        let mut g_qkv_point = Tensor::zeros(w.qkv_point.shape());
        let mut g_qkv_depth = Tensor::zeros(w.qkv_depth.shape());
        let mut g_out_point = Tensor::zeros(w.out_point.shape());
        let mut g_cpe: Vec<Tensor> =
            w.cpe.groups.iter().map(|g| Tensor::zeros(g.weights.shape())).collect();
        let mut g_s = 0.0;
        for clean in &cleans {
            let noisy = task.noisy(clean, &mut data_rng);
            let (pred, cache) = micro_forward(&noisy, &w)?;
            let (_, dpred) = loss_backward(&pred, clean)?;
            let g = micro_backward(&w, &cache, &dpred)?;
            g_qkv_point = g_qkv_point.add(&g.qkv_point)?;
            g_qkv_depth = g_qkv_depth.add(&g.qkv_depth)?;
            g_out_point = g_out_point.add(&g.out_point)?;
            for (acc, dk) in g_cpe.iter_mut().zip(&g.cpe) {
                *acc = acc.add(dk)?;
            }
            g_s += g.s;
        }
        let scale = lr / task.batch as f64;
        w.qkv_point = w.qkv_point.sub(&g_qkv_point.scale(scale))?;
        w.qkv_depth = w.qkv_depth.sub(&g_qkv_depth.scale(scale))?;
        w.out_point = w.out_point.sub(&g_out_point.scale(scale))?;
        for (g, dk) in w.cpe.groups.iter_mut().zip(&g_cpe) {
            g.weights = g.weights.sub(&dk.scale(scale))?;
        }
        w.s -= scale * g_s;

        let l = eval_loss(&w, &eval_set)?;
        if !l.is_finite() || l > DIVERGENCE_FACTOR * initial_loss {
            return Err(Error::Diverged(format!(
                "step {}: eval loss {l:.3e} vs initial {initial_loss:.3e}",
                step + 1
            )));
        }
        history.push(l);
    }
    Ok(TrainState { weights: w, initial_loss, loss_history: history, steps })
}

/// Save the trained block in the manifest + raw tensor container format.
pub fn save_micro_weights(path: &std::path::Path, w: &MicroBlockWeights) -> Result<()> {
    use std::fmt::Write as _;
    let mut entries: Vec<(String, &Tensor)> = vec![
        ("qkv_point".to_string(), &w.qkv_point),
        ("qkv_depth".to_string(), &w.qkv_depth),
        ("out_point".to_string(), &w.out_point),
    ];
    for (i, g) in w.cpe.groups.iter().enumerate() {
        entries.push((format!("cpe{i}"), &g.weights));
    }
    let s_tensor = Tensor::filled(&[1], w.s);
    let mut manifest = String::from("TAYLIN-CKPT1\n");
    let mut payload = Vec::new();
    for (name, t) in &entries {
        let shape = t.shape().iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(manifest, "param {name} {shape}");
        payload.extend_from_slice(&crate::io::tensor_to_bytes(t));
    }
    let _ = writeln!(manifest, "param s 1");
    payload.extend_from_slice(&crate::io::tensor_to_bytes(&s_tensor));
    manifest.push_str("end\n");
    let mut bytes = manifest.into_bytes();
    bytes.extend_from_slice(&payload);
    crate::io::write_atomic(path, &bytes)
}
