//! Property suites behind the `verify` command.
//!
//! Each suite runs a fixed set of seeded checks and records one line per
//! check. Reports contain no wall-clock fields, so two runs with the same
//! seed produce byte-identical output. The fault hook flips a sign inside
//! the focused mapping; a verifier that cannot flag that is itself broken,
//! so the hook doubles as a self-test of the suites.

use crate::analysis::{focusing_probe, mean_row_entropy, measure_attention_rank};
use crate::attention::{
    dense_attention_map, kernel_attention_matrix, phi_p, phi_p_impl, softmax_attention_oracle,
    tmsa_grad, tmsa_linear_diag, tmsa_quadratic_oracle, AttentionConfig, CpeWeights, QkvTriple,
};
use crate::backbone::{
    backbone_forward, pixel_shuffle, pixel_unshuffle, skff_fuse, ModelConfig, ModelWeights,
    SkffWeights,
};
use crate::embedding::{
    dcn_macs, dsdcn_forward, dsdcn_forward_traced, dsdcn_macs, DeformableEmbedConfig, DsdcnWeights,
};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{dot, norm, Tensor};
use std::fmt::Write as _;

/// Injected faults for suite self-tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Negate the first component of every `phi_p` output row.
    PhiSignFlip,
}

/// Outcome of one check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub suite: String,
    pub check: String,
    pub pass: bool,
    pub detail: String,
}

/// All checks of one run.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    fn add(&mut self, suite: &str, check: &str, pass: bool, detail: String) {
        self.checks.push(CheckResult {
            suite: suite.to_string(),
            check: check.to_string(),
            pass,
            detail,
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.pass).count()
    }

    /// JSON-lines serialization; keys in fixed order, deterministic floats.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{{\"suite\":\"{}\",\"check\":\"{}\",\"status\":\"{}\",\"detail\":\"{}\"}}",
                c.suite,
                c.check,
                if c.pass { "pass" } else { "fail" },
                c.detail.replace('"', "'")
            );
        }
        out
    }
}

/// Suites known to `verify`.
pub const SUITES: [&str; 5] = ["kernel", "gradients", "embedding", "backbone", "all"];

/// Run one suite (or `all`) at the given seed.
pub fn run_suite(name: &str, seed: u64, fault: Fault) -> Result<Report> {
    let mut report = Report::default();
    match name {
        "kernel" => kernel_suite(seed, fault, &mut report)?,
        "gradients" => gradients_suite(seed, &mut report)?,
        "embedding" => embedding_suite(seed, &mut report)?,
        "backbone" => backbone_suite(seed, &mut report)?,
        "all" => {
            kernel_suite(seed, fault, &mut report)?;
            gradients_suite(seed, &mut report)?;
            embedding_suite(seed, &mut report)?;
            backbone_suite(seed, &mut report)?;
        }
        other => {
            return Err(crate::error::Error::Config(format!(
                "unknown suite '{other}' (expected one of {SUITES:?})"
            )))
        }
    }
    Ok(report)
}

fn random_triple(rng: &mut Rng, n: usize, d: usize) -> QkvTriple {
    QkvTriple::new(
        rng.normal_tensor(&[n, d]),
        rng.normal_tensor(&[n, d]),
        rng.normal_tensor(&[n, d]),
    )
    .expect("matching shapes")
}

fn kernel_suite(seed: u64, fault: Fault, report: &mut Report) -> Result<()> {
    let suite = "kernel";
    let mut rng = Rng::new(seed);

    // matmul associativity underwrites the whole linear rewrite
    {
        let a = rng.normal_tensor(&[32, 16]);
        let b = rng.normal_tensor(&[16, 16]);
        let c = rng.normal_tensor(&[16, 32]);
        let left = a.matmul(&b)?.matmul(&c)?;
        let right = a.matmul(&b.matmul(&c)?)?;
        let diff = left.max_abs_diff(&right)?;
        report.add(suite, "matmul_associativity", diff < 1e-10, format!("max_abs_diff={diff:.3e}"));
    }

    // row normalization: unit norms, idempotent
    {
        let x = rng.normal_tensor(&[16, 8]);
        let n1 = x.normalize_rows();
        let worst = (0..16).map(|i| (norm(n1.row(i)) - 1.0).abs()).fold(0.0, f64::max);
        let idem = n1.normalize_rows().max_abs_diff(&n1)?;
        report.add(
            suite,
            "normalize_rows_unit_and_idempotent",
            worst < 1e-12 && idem < 1e-12,
            format!("norm_err={worst:.3e} idem_err={idem:.3e}"),
        );
    }

    // norm preservation of the focused mapping (fault hook lives here)
    {
        let flip = fault == Fault::PhiSignFlip;
        let x = rng.normal_tensor(&[24, 6]);
        let mut worst = 0.0f64;
        for p in [3.0, 4.0, 5.0] {
            let y = phi_p_impl(&x, p, flip);
            for i in 0..24 {
                let relu_norm = x
                    .row(i)
                    .iter()
                    .map(|&v| if v > 0.0 { v * v } else { 0.0 })
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max((norm(y.row(i)) - relu_norm).abs());
            }
            // the mapping must also keep components nonnegative
            if y.data().iter().any(|&v| v < 0.0) {
                worst = worst.max(1.0);
            }
        }
        report.add(suite, "phi_norm_preservation", worst < 1e-12, format!("max_err={worst:.3e}"));
    }

    // mapped-vector anchor values (p = 3 reproduces them)
    {
        let flip = fault == Fault::PhiSignFlip;
        let k2 = Tensor::from_rows(&[&[0.9165, 0.4000]])?;
        let y = phi_p_impl(&k2, 3.0, flip);
        let err = (y.at2(0, 0) - 0.9966).abs().max((y.at2(0, 1) - 0.0828).abs());
        let k3 = Tensor::from_rows(&[&[-0.9798, -0.2000]])?;
        let z = phi_p(&k3, 3.0);
        let zerr = z.row(0).iter().map(|v| v.abs()).fold(0.0, f64::max);
        report.add(
            suite,
            "phi_anchor_vectors",
            err < 1e-3 && zerr == 0.0,
            format!("mapped_err={err:.3e} rectified_zero_err={zerr:.3e}"),
        );
    }

    // focusing: amplification of aligned pairs, suppression of anti-aligned
    {
        let probe = focusing_probe();
        let qn = probe.q.normalize_rows();
        let kn = probe.k.normalize_rows();
        let qf = phi_p(&qn, 3.0);
        let kf = phi_p(&kn, 3.0);
        let amplified = dot(qf.row(0), kf.row(0)) > dot(qn.row(0), kn.row(0));
        let suppressed = dot(qf.row(0), kf.row(3)) < dot(qn.row(0), kn.row(3));
        report.add(
            suite,
            "phi_focusing_orderings",
            amplified && suppressed,
            format!(
                "aligned {:.4}>{:.4} anti {:.4}<{:.4}",
                dot(qf.row(0), kf.row(0)),
                dot(qn.row(0), kn.row(0)),
                dot(qf.row(0), kf.row(3)),
                dot(qn.row(0), kn.row(3))
            ),
        );
    }

    // linear path equals quadratic oracle across a seeded batch
    {
        let mut worst = 0.0f64;
        for i in 0..20 {
            let n = 1 + rng.below(96);
            let d = 1 + rng.below(12);
            let t = random_triple(&mut rng, n, d);
            let cfg = AttentionConfig {
                focused_factor: [3.0, 4.0, 5.0][i % 3],
                modulation: [0.0, 0.5, 1.0][i % 3],
                ..AttentionConfig::for_dim(d)
            };
            let quad = tmsa_quadratic_oracle(&t, &cfg)?;
            let (lin, _) = tmsa_linear_diag(&t, &cfg)?;
            worst = worst.max(lin.max_abs_diff(&quad)?);
        }
        report.add(suite, "linear_equals_quadratic", worst < 1e-9, format!("max_abs_diff={worst:.3e}"));
    }

    // softmax oracle sanity on identical values
    {
        let q = rng.normal_tensor(&[6, 3]);
        let k = rng.normal_tensor(&[6, 3]);
        let vrow = [0.3, -1.2, 2.5];
        let v = Tensor::from_rows(&[&vrow[..]; 6])?;
        let out = softmax_attention_oracle(&QkvTriple::new(q, k, v)?)?;
        let mut worst = 0.0f64;
        for i in 0..6 {
            for j in 0..3 {
                worst = worst.max((out.at2(i, j) - vrow[j]).abs());
            }
        }
        report.add(suite, "softmax_convexity", worst < 1e-12, format!("max_err={worst:.3e}"));
    }

    // dense map row-stochasticity and nonnegativity
    {
        let mut worst_sum = 0.0f64;
        let mut min_entry = f64::INFINITY;
        for _ in 0..10 {
            let n = 4 + rng.below(48);
            let d = 2 + rng.below(8);
            let t = random_triple(&mut rng, n, d);
            let cfg = AttentionConfig::for_dim(d);
            let map = dense_attention_map(&t, &cfg, true, true)?;
            for i in 0..n {
                let sum: f64 = map.row(i).iter().sum();
                worst_sum = worst_sum.max((sum - 1.0).abs());
                min_entry = min_entry.min(map.row(i).iter().cloned().fold(f64::INFINITY, f64::min));
            }
        }
        report.add(
            suite,
            "dense_map_row_stochastic",
            worst_sum < 1e-6 && min_entry >= 0.0,
            format!("max_sum_err={worst_sum:.3e} min_entry={min_entry:.3e}"),
        );
    }

    // permutation equivariance of the linear kernel
    {
        let n = 12;
        let t = random_triple(&mut rng, n, 4);
        let cfg = AttentionConfig::for_dim(4);
        let (base, _) = tmsa_linear_diag(&t, &cfg)?;
        let perm = |m: &Tensor| {
            let rows: Vec<&[f64]> = (0..n).rev().map(|i| m.row(i)).collect();
            Tensor::from_rows(&rows).expect("permuted rows")
        };
        let tp = QkvTriple::new(perm(&t.q), perm(&t.k), perm(&t.v))?;
        let (out_p, _) = tmsa_linear_diag(&tp, &cfg)?;
        let diff = out_p.max_abs_diff(&perm(&base))?;
        report.add(suite, "permutation_equivariance", diff < 1e-12, format!("max_abs_diff={diff:.3e}"));
    }

    // s = 0 reduces to the first-order path
    {
        let t = random_triple(&mut rng, 16, 4);
        let cfg = AttentionConfig { modulation: 0.0, ..AttentionConfig::for_dim(4) };
        let (lin, _) = tmsa_linear_diag(&t, &cfg)?;
        let quad = tmsa_quadratic_oracle(&t, &cfg)?;
        let diff = lin.max_abs_diff(&quad)?;
        report.add(suite, "s_zero_first_order_reduction", diff < 1e-12, format!("max_abs_diff={diff:.3e}"));
    }

    // rank bound of the kernel-only map, and the positional operator's lift
    {
        let t = random_triple(&mut rng, 32, 2);
        let cfg = AttentionConfig::for_dim(2);
        let m = kernel_attention_matrix(&t, &cfg, true, true)?;
        let rank = m.rank_estimate(1e-8)?;
        let cpe_w = CpeWeights::init(2, &[3], &mut rng, 0.5)?;
        let (rk, rc) = measure_attention_rank(&t, &cfg, &cpe_w, 4, 8)?;
        report.add(
            suite,
            "rank_bound_and_cpe_lift",
            rank <= 5 && rk <= 5 && rc >= rk,
            format!("kernel_rank={rank} with_cpe={rc}"),
        );
    }

    // remainder lowers row entropy on the focusing probe
    {
        let probe = focusing_probe();
        let mut cfg = AttentionConfig::for_dim(2);
        cfg.modulation = 0.0;
        let flat = dense_attention_map(&probe, &cfg, true, false)?;
        cfg.modulation = 0.5;
        let sharp = dense_attention_map(&probe, &cfg, true, true)?;
        let (hf, hs) = (mean_row_entropy(&flat), mean_row_entropy(&sharp));
        report.add(suite, "focusing_entropy_drop", hs < hf, format!("s0={hf:.6} s0.5={hs:.6}"));
    }

    Ok(())
}

fn gradients_suite(seed: u64, report: &mut Report) -> Result<()> {
    let suite = "gradients";
    let mut rng = Rng::new(seed);

    // zero upstream gives zero gradients
    {
        let t = random_triple(&mut rng, 5, 3);
        let cfg = AttentionConfig::for_dim(3);
        let g = tmsa_grad(&t, &cfg, &Tensor::zeros(&[5, 3]))?;
        let zero = g.d_q.frob_norm() + g.d_k.frob_norm() + g.d_v.frob_norm() + g.d_s.abs();
        report.add(suite, "zero_upstream_zero_grads", zero == 0.0, format!("norm_sum={zero:.3e}"));
    }

    // analytic vs central finite differences
    {
        let mut worst = 0.0f64;
        for _ in 0..6 {
            let n = 2 + rng.below(6);
            let d = 2 + rng.below(3);
            let t = random_triple(&mut rng, n, d);
            let cfg = AttentionConfig::for_dim(d);
            let upstream = rng.normal_tensor(&[n, d]);
            worst = worst.max(fd_check(&t, &cfg, &upstream)?);
        }
        report.add(suite, "finite_difference_agreement", worst < 1e-5, format!("max_rel_err={worst:.3e}"));
    }

    // modulation gradient moves s on a probe step
    {
        let t = random_triple(&mut rng, 8, 4);
        let cfg = AttentionConfig::for_dim(4);
        let upstream = rng.normal_tensor(&[8, 4]);
        let g = tmsa_grad(&t, &cfg, &upstream)?;
        report.add(suite, "modulation_participates", g.d_s != 0.0, format!("d_s={:.3e}", g.d_s));
    }

    Ok(())
}

/// Max relative finite-difference error over every coordinate of Q, K, V
/// and the modulation scalar. Step 1e-5, denominator `max(1, |a|, |fd|)`.
pub fn fd_check(t: &QkvTriple, cfg: &AttentionConfig, upstream: &Tensor) -> Result<f64> {
    let g = tmsa_grad(t, cfg, upstream)?;
    let objective = |t: &QkvTriple, cfg: &AttentionConfig| -> Result<f64> {
        let (out, _) = tmsa_linear_diag(t, cfg)?;
        Ok(out.data().iter().zip(upstream.data()).map(|(o, u)| o * u).sum())
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut check = |analytic: f64, fd: f64| {
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
        if rel > worst {
            worst = rel;
        }
    };
    for field in 0..3 {
        for idx in 0..t.q.len() {
            let mut tp = t.clone();
            let mut tm = t.clone();
            let (tpf, tmf, gv) = match field {
                0 => (&mut tp.q, &mut tm.q, g.d_q.data()[idx]),
                1 => (&mut tp.k, &mut tm.k, g.d_k.data()[idx]),
                _ => (&mut tp.v, &mut tm.v, g.d_v.data()[idx]),
            };
            tpf.data_mut()[idx] += h;
            tmf.data_mut()[idx] -= h;
            let fd = (objective(&tp, cfg)? - objective(&tm, cfg)?) / (2.0 * h);
            check(gv, fd);
        }
    }
    {
        let mut cp = cfg.clone();
        cp.modulation += h;
        let mut cm = cfg.clone();
        cm.modulation -= h;
        let fd = (objective(t, &cp)? - objective(t, &cm)?) / (2.0 * h);
        check(g.d_s, fd);
    }
    Ok(worst)
}

fn embedding_suite(seed: u64, report: &mut Report) -> Result<()> {
    let suite = "embedding";
    let mut rng = Rng::new(seed);
    let cfg = DeformableEmbedConfig {
        kernel: 3,
        stack_depth: 1,
        offset_bound: 3.0,
        in_channels: 3,
        out_channels: 5,
        stride: 1,
    };

    // zero-offset degeneracy against a plain separable reference
    {
        let x = rng.normal_tensor(&[3, 10, 9]);
        let w = DsdcnWeights::init(3, 5, 3, &mut rng, 0.5);
        let got = dsdcn_forward(&x, &w, &cfg)?;
        // reference: depthwise then pointwise, integer taps
        let dep = crate::conv::depthwise(&x, &w.value_depth, None, 1)?;
        let want = crate::conv::pointwise(&dep, &w.value_point, Some(&w.value_point_bias))?;
        let diff = got.max_abs_diff(&want)?;
        report.add(suite, "zero_offset_separable_equivalence", diff < 1e-10, format!("max_abs_diff={diff:.3e}"));
    }

    // clamped offsets never exceed the bound
    {
        let x = rng.uniform_tensor(&[3, 8, 8], -1.0, 1.0);
        let mut w = DsdcnWeights::init(3, 5, 3, &mut rng, 0.5);
        w.offset_depth = rng.trunc_normal_tensor(&[3, 3, 3], 2.0);
        w.offset_point = rng.trunc_normal_tensor(&[18, 3], 3.0);
        w.offset_point_bias = rng.uniform_tensor(&[18], -8.0, 8.0);
        let (_, trace) = dsdcn_forward_traced(&x, &w, &cfg)?;
        report.add(
            suite,
            "offset_clamp_exact",
            trace.max_abs_offset <= 3.0 && trace.max_displacement <= 3.0,
            format!("max_offset={:.4}", trace.max_abs_offset),
        );
    }

    // 9×9 locality window with bound 3
    {
        let x = rng.normal_tensor(&[2, 17, 17]);
        let c2 = DeformableEmbedConfig { in_channels: 2, out_channels: 2, ..cfg.clone() };
        let mut w = DsdcnWeights::init(2, 2, 3, &mut rng, 0.4);
        w.offset_depth = rng.trunc_normal_tensor(&[2, 3, 3], 1.5);
        w.offset_point = rng.trunc_normal_tensor(&[18, 2], 2.0);
        w.offset_point_bias = rng.uniform_tensor(&[18], -5.0, 5.0);
        let base = dsdcn_forward(&x, &w, &c2)?;
        let center = 8usize;
        let mut confined = true;
        for (py, px) in [(0usize, 0usize), (0, 16), (16, 16), (2, 8), (8, 14)] {
            let mut xp = x.clone();
            xp.set3(0, py, px, xp.at3(0, py, px) + 50.0);
            let out = dsdcn_forward(&xp, &w, &c2)?;
            if out.at3(0, center, center) != base.at3(0, center, center)
                || out.at3(1, center, center) != base.at3(1, center, center)
            {
                confined = false;
            }
        }
        report.add(suite, "locality_window_9x9", confined, "probes outside the window leave the center bit-identical".into());
    }

    // closed-form cost values and the separable advantage
    {
        let c24 = DeformableEmbedConfig { in_channels: 24, out_channels: 24, ..cfg.clone() };
        let ok = dsdcn_macs(&c24, 8, 8)? == 147_456 && dcn_macs(&c24, 8, 8)? == 635_904;
        let mut cheaper = true;
        for d in [8usize, 24, 96] {
            let c = DeformableEmbedConfig { in_channels: d, out_channels: d, ..cfg.clone() };
            cheaper &= dsdcn_macs(&c, 16, 16)? < dcn_macs(&c, 16, 16)?;
        }
        report.add(suite, "cost_formulas", ok && cheaper, "pinned values and separable advantage".into());
    }

    Ok(())
}

fn backbone_suite(seed: u64, report: &mut Report) -> Result<()> {
    let suite = "backbone";
    let mut rng = Rng::new(seed);

    // pixel shuffle round trip is bit-exact
    {
        let t = rng.normal_tensor(&[3, 8, 8]);
        let round = pixel_shuffle(&pixel_unshuffle(&t, 2)?, 2)?;
        report.add(suite, "pixel_shuffle_roundtrip", round == t, "bit-exact inverse".into());
    }

    // SKFF convexity
    {
        let a = rng.normal_tensor(&[4, 3, 3]);
        let b = rng.normal_tensor(&[4, 3, 3]);
        let w = SkffWeights::init(4, 2, &mut rng, 1.0);
        let fused = skff_fuse(&[a.clone(), b.clone()], &w)?;
        let mut convex = true;
        for i in 0..fused.len() {
            let lo = a.data()[i].min(b.data()[i]) - 1e-12;
            let hi = a.data()[i].max(b.data()[i]) + 1e-12;
            convex &= fused.data()[i] >= lo && fused.data()[i] <= hi;
        }
        report.add(suite, "skff_convexity", convex, "fused values inside the branch hull".into());
    }

    // residual identity with a zeroed final convolution
    {
        let cfg = ModelConfig::nano();
        let weights = ModelWeights::zero_final(&cfg, &mut Rng::new(seed))?;
        let img = rng.uniform_tensor(&[3, 16, 16], 0.0, 1.0);
        let out = backbone_forward(&img, &weights, &cfg, 1)?;
        let identical = out == img;
        report.add(suite, "residual_identity", identical, "zero final conv returns the input bit-exactly".into());
    }

    // shape preservation and determinism across runs and branch threading
    {
        let cfg = ModelConfig::nano();
        let weights = ModelWeights::init(&cfg, &mut Rng::new(seed ^ 1))?;
        let img = rng.uniform_tensor(&[3, 16, 24], 0.0, 1.0);
        let a = backbone_forward(&img, &weights, &cfg, 1)?;
        let b = backbone_forward(&img, &weights, &cfg, 2)?;
        let same = a == b && a.shape() == img.shape();
        report.add(
            suite,
            "shape_and_branch_order_determinism",
            same,
            format!("shape={:?} threaded_equal={}", a.shape(), a == b),
        );
    }

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_clean() {
        let report = run_suite("all", 1, Fault::None).unwrap();
        assert!(report.all_passed(), "failures: {:?}", report.checks.iter().filter(|c| !c.pass).collect::<Vec<_>>());
        assert!(report.checks.len() >= 18);
    }

    #[test]
    fn fault_injection_is_detected() {
        let report = run_suite("kernel", 1, Fault::PhiSignFlip).unwrap();
        assert!(!report.all_passed(), "the sign flip must trip at least one check");
    }

    #[test]
    fn reports_are_deterministic() {
        let a = run_suite("all", 7, Fault::None).unwrap().to_jsonl();
        let b = run_suite("all", 7, Fault::None).unwrap().to_jsonl();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run_suite("nonsense", 1, Fault::None).is_err());
    }
}
