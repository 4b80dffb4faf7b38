//! `taylin` — verification suites, benchmarks, attention maps, a
//! restoration demo, micro-training and complexity accounting, all behind
//! one deterministic command-line tool.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O
//! error. Every command is deterministic given `--seed` and its inputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use taylin_core::analysis::{
    attention_macs, bench_scaling, run_ablation, AblationSpec, AttentionKind, BenchKernel,
};
use taylin_core::attention::{dense_attention_map, AttentionConfig, QkvTriple};
use taylin_core::backbone::{backbone_forward, count_params, ModelConfig, ModelWeights};
use taylin_core::embedding::{dcn_macs, dsdcn_macs, DeformableEmbedConfig};
use taylin_core::error::Error;
use taylin_core::io;
use taylin_core::rng::Rng;
use taylin_core::tensor::Tensor;
use taylin_core::training::{micro_train, MicroTask};
use taylin_core::verify::{run_suite, Fault, SUITES};

const USAGE: &str = "usage: taylin <command> [options]

commands:
  verify <suite>     run a property suite (kernel|gradients|embedding|backbone|all)
                     options: --seed N --out-dir DIR --inject-fault phi-sign
  bench              runtime-scaling benchmark with fitted log-log slope,
                     or branch-parallel speedup (--op branches)
                     options: --op linear|softmax|noop|branches|all --sizes CSV
                              --reps N --seed N --threads N --format csv|svg
                              --out-dir DIR
  macs               closed-form multiply-accumulate counts
                     options: --h N --w N --d N --k N | --model nano|b|l|xl --res HxW
  attn-map           render attention maps (PGM heat maps or raw tensors)
                     options: --probe fig|random --n N --d N --p CSV --s CSV
                              --seed N --out-dir DIR --format pgm|raw
  restore            run the restoration network on a binary PPM (P6)
                     options: --input F --output F [--config F|nano|b|l|xl]
                              [--checkpoint F | --random-init] [--save-checkpoint F]
                              [--seed N] [--threads N]
  micro-train        gradient-descent demonstration on the synthetic task
                     options: --steps N --lr F --sigma F --seed N --out-dir DIR
  ablate             sweep remainder/CPE/offset-bound/focused-factor toggles
                     options: --seed N --out-dir DIR
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{USAGE}");
            ExitCode::from(2)
        }
        Err(CliError::Io(msg)) => {
            eprintln!("io error: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Failed(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}

enum CliError {
    Usage(String),
    Io(String),
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(m) | Error::Parse(m) => CliError::Io(m),
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Failed(other.to_string()),
        }
    }
}

struct Opts {
    flags: Vec<(String, String)>,
}

impl Opts {
    fn parse(args: &[String], allowed: &[&str]) -> Result<Opts, CliError> {
        let mut flags = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let a = &args[i];
            let name = a
                .strip_prefix("--")
                .ok_or_else(|| CliError::Usage(format!("unexpected argument '{a}'")))?;
            if !allowed.contains(&name) {
                return Err(CliError::Usage(format!("unknown option '--{name}'")));
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| CliError::Usage(format!("option '--{name}' needs a value")))?;
            flags.push((name.to_string(), value.clone()));
            i += 2;
        }
        Ok(Opts { flags })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.flags.iter().rev().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }

    fn get_u64(&self, name: &str, default: u64) -> Result<u64, CliError> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| CliError::Usage(format!("bad --{name} '{v}'"))),
        }
    }

    fn get_usize(&self, name: &str, default: usize) -> Result<usize, CliError> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| CliError::Usage(format!("bad --{name} '{v}'"))),
        }
    }

    fn get_f64(&self, name: &str, default: f64) -> Result<f64, CliError> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| CliError::Usage(format!("bad --{name} '{v}'"))),
        }
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = PathBuf::from(self.get("out-dir").unwrap_or("."));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }
}

fn run(args: &[String]) -> Result<ExitCode, CliError> {
    let Some(command) = args.first() else {
        return Err(CliError::Usage("missing command".into()));
    };
    match command.as_str() {
        "verify" => cmd_verify(&args[1..]),
        "bench" => cmd_bench(&args[1..]),
        "macs" => cmd_macs(&args[1..]),
        "attn-map" => cmd_attn_map(&args[1..]),
        "restore" => cmd_restore(&args[1..]),
        "micro-train" => cmd_micro_train(&args[1..]),
        "ablate" => cmd_ablate(&args[1..]),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(ExitCode::SUCCESS)
        }
        other => Err(CliError::Usage(format!("unknown command '{other}'"))),
    }
}

fn cmd_verify(args: &[String]) -> Result<ExitCode, CliError> {
    let Some(suite) = args.first() else {
        return Err(CliError::Usage(format!("verify needs a suite: {SUITES:?}")));
    };
    if suite.starts_with("--") {
        return Err(CliError::Usage(format!("verify needs a suite before options: {SUITES:?}")));
    }
    let opts = Opts::parse(&args[1..], &["seed", "out-dir", "inject-fault", "threads"])?;
    let seed = opts.get_u64("seed", 0)?;
    let fault = match opts.get("inject-fault") {
        None => Fault::None,
        Some("phi-sign") => Fault::PhiSignFlip,
        Some(other) => return Err(CliError::Usage(format!("unknown fault '{other}'"))),
    };
    let report = run_suite(suite, seed, fault)?;
    let jsonl = report.to_jsonl();
    print!("{jsonl}");
    if let Some(dir) = opts.get("out-dir") {
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        io::write_atomic(&dir.join(format!("verify_{suite}_seed{seed}.jsonl")), jsonl.as_bytes())?;
    }
    if report.all_passed() {
        eprintln!("verify {suite}: {} checks passed", report.checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        Err(CliError::Failed(format!(
            "verify {suite}: {} of {} checks failed",
            report.failures(),
            report.checks.len()
        )))
    }
}

fn cmd_bench(args: &[String]) -> Result<ExitCode, CliError> {
    let opts = Opts::parse(args, &["op", "sizes", "reps", "seed", "format", "out-dir", "threads"])?;
    let seed = opts.get_u64("seed", 0)?;
    let reps = opts.get_usize("reps", 5)?;
    let op = opts.get("op").unwrap_or("all");
    let parse_sizes = |txt: &str| -> Result<Vec<usize>, CliError> {
        txt.split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("bad size '{t}'"))))
            .collect()
    };
    let mut jobs: Vec<(BenchKernel, Vec<usize>)> = Vec::new();
    let linear_sizes = match opts.get("sizes") {
        Some(s) if op == "linear" => parse_sizes(s)?,
        _ => vec![1024, 4096, 16384, 65536],
    };
    let softmax_sizes = match opts.get("sizes") {
        Some(s) if op == "softmax" => parse_sizes(s)?,
        _ => vec![256, 512, 1024, 2048],
    };
    let noop_sizes = match opts.get("sizes") {
        Some(s) if op == "noop" => parse_sizes(s)?,
        _ => vec![64, 256, 1024, 4096],
    };
    match op {
        "linear" => jobs.push((BenchKernel::TaylorLinear { dim: 16 }, linear_sizes)),
        "softmax" => jobs.push((BenchKernel::SoftmaxOracle { dim: 16 }, softmax_sizes)),
        "noop" => jobs.push((BenchKernel::ConstProbe, noop_sizes)),
        "branches" => {
            // parallel-branch speedup, reported as a ratio
            let threads = opts.get_usize("threads", 2)?;
            let (serial, parallel, ratio) =
                taylin_core::analysis::bench_branch_parallel(threads, reps, seed)?;
            println!(
                "branch_parallel: serial {serial:.4}s, {threads} threads {parallel:.4}s, speedup {ratio:.2}x"
            );
            return Ok(ExitCode::SUCCESS);
        }
        "all" => {
            jobs.push((BenchKernel::TaylorLinear { dim: 16 }, linear_sizes));
            jobs.push((BenchKernel::SoftmaxOracle { dim: 16 }, softmax_sizes));
            jobs.push((BenchKernel::ConstProbe, noop_sizes));
        }
        other => return Err(CliError::Usage(format!("unknown --op '{other}'"))),
    }
    let dir = opts.out_dir()?;
    for (kernel, sizes) in jobs {
        let report = bench_scaling(kernel, &sizes, reps, seed)?;
        println!(
            "{}: slope {:.3} (residual {:.3}) over n {:?}",
            report.kernel, report.slope, report.residual, report.sizes
        );
        match opts.get("format").unwrap_or("csv") {
            "csv" => io::write_atomic(
                &dir.join(format!("scaling_{}.csv", report.kernel)),
                report.to_csv().as_bytes(),
            )?,
            "svg" => io::write_atomic(
                &dir.join(format!("scaling_{}.svg", report.kernel)),
                report.to_svg().as_bytes(),
            )?,
            other => return Err(CliError::Usage(format!("unknown --format '{other}'"))),
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_macs(args: &[String]) -> Result<ExitCode, CliError> {
    let opts = Opts::parse(args, &["h", "w", "d", "k", "model", "res"])?;
    if let Some(model) = opts.get("model") {
        let cfg = ModelConfig::by_name(model)?;
        let params = count_params(&cfg)?;
        println!("model {model}: {params} parameters ({:.2}M)", params as f64 / 1e6);
        if model == "b" {
            let reported = 2_630_000f64;
            println!(
                "  reported 2.63M; relative deviation {:+.2}%",
                (params as f64 - reported) / reported * 100.0
            );
        }
        let res = opts.get("res").unwrap_or("256x256");
        let (h, w) = res
            .split_once('x')
            .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
            .ok_or_else(|| CliError::Usage(format!("bad --res '{res}'")))?;
        println!("  note: reported MACs figures carry no stated input resolution;");
        println!("  the table below uses {h}x{w} and counts attention + embedding only");
        // encoder at /1 /2 /4 /8, decoder at /4 /2 /1, refinement at /1
        let divisors = [1usize, 2, 4, 8, 4, 2, 1, 1];
        let mut total: u128 = 0;
        for stage in 0..8 {
            let (sh, sw) = (h / divisors[stage], w / divisors[stage]);
            let d = cfg.channels[stage];
            let att = attention_macs(AttentionKind::TaylorLinear, sh, sw, d, 3)?;
            let embed_cfg = DeformableEmbedConfig {
                kernel: cfg.embed_kernel,
                stack_depth: 1,
                offset_bound: cfg.offset_bound,
                in_channels: d,
                out_channels: d,
                stride: 1,
            };
            let embed = dsdcn_macs(&embed_cfg, sh, sw)?;
            let blocks = (cfg.blocks[stage] * cfg.branches[stage]) as u128;
            let layers: u128 = (0..cfg.branches[stage]).map(|b| (b + 1) as u128).sum();
            let stage_total = blocks * att as u128 + layers * embed as u128;
            total += stage_total;
            println!(
                "  stage {stage}: {}x{} c{} -> {:.3}G",
                sh,
                sw,
                d,
                stage_total as f64 / 1e9
            );
        }
        println!("  total ~{:.2}G multiply-accumulates", total as f64 / 1e9);
        return Ok(ExitCode::SUCCESS);
    }
    let h = opts.get_usize("h", 16)?;
    let w = opts.get_usize("w", 16)?;
    let d = opts.get_usize("d", 8)?;
    let k = opts.get_usize("k", 3)?;
    let softmax = attention_macs(AttentionKind::Softmax, h, w, d, k)?;
    let linear = attention_macs(AttentionKind::TaylorLinear, h, w, d, k)?;
    let emb = DeformableEmbedConfig {
        kernel: k,
        stack_depth: 1,
        offset_bound: 3.0,
        in_channels: d,
        out_channels: d,
        stride: 1,
    };
    println!("h={h} w={w} d={d} k={k}");
    println!("  softmax attention : {softmax}");
    println!("  linear attention  : {linear}");
    println!("  deformable conv   : {}", dcn_macs(&emb, h, w)?);
    println!("  separable deform  : {}", dsdcn_macs(&emb, h, w)?);
    Ok(ExitCode::SUCCESS)
}

/// Render a row-normalized attention map to 8-bit grayscale.
fn map_to_pgm(map: &Tensor) -> (usize, usize, Vec<u8>) {
    let (n, m) = (map.shape()[0], map.shape()[1]);
    let mut pixels = Vec::with_capacity(n * m);
    for i in 0..n {
        let row = map.row(i);
        let max = row.iter().cloned().fold(0.0, f64::max);
        for &v in row {
            let scaled = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
            pixels.push(scaled.clamp(0.0, 255.0) as u8);
        }
    }
    (m, n, pixels)
}

fn cmd_attn_map(args: &[String]) -> Result<ExitCode, CliError> {
    let opts = Opts::parse(args, &["probe", "n", "d", "p", "s", "seed", "out-dir", "format"])?;
    let seed = opts.get_u64("seed", 0)?;
    let dir = opts.out_dir()?;
    let parse_f64_list = |txt: &str| -> Result<Vec<f64>, CliError> {
        txt.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("bad value '{t}'"))))
            .collect()
    };
    let p_values = match opts.get("p") {
        Some(s) => parse_f64_list(s)?,
        None => vec![3.0, 4.0, 8.0],
    };
    let s_values = match opts.get("s") {
        Some(s) => parse_f64_list(s)?,
        None => vec![0.0, 0.5],
    };
    let probe = opts.get("probe").unwrap_or("fig");
    let (triple, d) = match probe {
        "fig" => (taylin_core::analysis::focusing_probe(), 2),
        "random" => {
            let n = opts.get_usize("n", 64)?;
            let d = opts.get_usize("d", 4)?;
            if n > taylin_core::attention::DENSE_MAP_GUARD {
                return Err(CliError::Usage(format!("--n {n} exceeds the dense-map guard")));
            }
            let mut rng = Rng::new(seed);
            (
                QkvTriple::new(
                    rng.normal_tensor(&[n, d]),
                    rng.normal_tensor(&[n, d]),
                    rng.normal_tensor(&[n, d]),
                )?,
                d,
            )
        }
        other => return Err(CliError::Usage(format!("unknown --probe '{other}'"))),
    };
    let format = opts.get("format").unwrap_or("pgm");
    for &s in &s_values {
        for &p in &p_values {
            let cfg = AttentionConfig {
                focused_factor: p,
                modulation: s,
                ..AttentionConfig::for_dim(d)
            };
            let map = dense_attention_map(&triple, &cfg, true, true)?;
            let entropy = taylin_core::analysis::mean_row_entropy(&map);
            let maxw = map.row(0).iter().cloned().fold(0.0, f64::max);
            let name = match format {
                "pgm" => {
                    let (w, h, pixels) = map_to_pgm(&map);
                    let name = format!("attn_{probe}_p{p}_s{s}.pgm");
                    io::write_pgm(&dir.join(&name), w, h, &pixels)?;
                    name
                }
                "raw" => {
                    let name = format!("attn_{probe}_p{p}_s{s}.tnsr");
                    io::write_tensor(&dir.join(&name), &map)?;
                    name
                }
                other => return Err(CliError::Usage(format!("unknown --format '{other}'"))),
            };
            println!("{name}: mean_row_entropy={entropy:.6} max_first_row_weight={maxw:.6}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Reflective padding up to the next multiple of 8 on both axes.
fn pad_reflect(img: &Tensor) -> (Tensor, usize, usize) {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let th = h.div_ceil(8) * 8;
    let tw = w.div_ceil(8) * 8;
    if th == h && tw == w {
        return (img.clone(), h, w);
    }
    let mut out = Tensor::zeros(&[c, th, tw]);
    for ch in 0..c {
        for y in 0..th {
            // reflect without repeating the edge sample where possible
            let sy = if y < h { y } else { h.saturating_sub(2).saturating_sub(y - h) };
            for x in 0..tw {
                let sx = if x < w { x } else { w.saturating_sub(2).saturating_sub(x - w) };
                out.set3(ch, y, x, img.at3(ch, sy.min(h - 1), sx.min(w - 1)));
            }
        }
    }
    (out, h, w)
}

fn cmd_restore(args: &[String]) -> Result<ExitCode, CliError> {
    let opts = Opts::parse(
        args,
        &["input", "output", "config", "checkpoint", "random-init", "save-checkpoint", "seed", "threads"],
    )?;
    let input = opts.get("input").ok_or_else(|| CliError::Usage("restore needs --input".into()))?;
    let output = opts.get("output").ok_or_else(|| CliError::Usage("restore needs --output".into()))?;
    let threads = opts.get_usize("threads", 1)?;
    let seed = opts.get_u64("seed", 0)?;
    let cfg = match opts.get("config") {
        None => ModelConfig::nano(),
        Some(name) if ["nano", "b", "l", "xl"].contains(&name) => ModelConfig::by_name(name)?,
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{path}: {e}")))?;
            ModelConfig::from_text(&text)?
        }
    };
    let weights = match (opts.get("checkpoint"), opts.get("random-init")) {
        (Some(path), _) => ModelWeights::load(Path::new(path), &cfg)?,
        (None, Some("true")) => ModelWeights::init(&cfg, &mut Rng::new(seed))?,
        _ => ModelWeights::zero_final(&cfg, &mut Rng::new(seed))?,
    };
    if let Some(path) = opts.get("save-checkpoint") {
        weights.save(Path::new(path))?;
        println!("checkpoint saved to {path}");
    }

    let (w, h, rgb) = io::read_ppm(Path::new(input))?;
    let mut img = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                img.set3(ch, y, x, rgb[(y * w + x) * 3 + ch] as f64 / 255.0);
            }
        }
    }
    let (padded, oh, ow) = pad_reflect(&img);
    let restored = backbone_forward(&padded, &weights, &cfg, threads)?;
    let mut out_rgb = Vec::with_capacity(3 * oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..3 {
                let v = (restored.at3(ch, y, x) * 255.0).round().clamp(0.0, 255.0);
                out_rgb.push(v as u8);
            }
        }
    }
    io::write_ppm(Path::new(output), ow, oh, &out_rgb)?;
    println!("restored {input} -> {output} ({ow}x{oh})");
    Ok(ExitCode::SUCCESS)
}

fn cmd_micro_train(args: &[String]) -> Result<ExitCode, CliError> {
    let opts = Opts::parse(args, &["steps", "lr", "sigma", "seed", "batch", "out-dir"])?;
    let steps = opts.get_usize("steps", 500)?;
    let lr = opts.get_f64("lr", taylin_core::training::DEFAULT_LR)?;
    let sigma = opts.get_f64("sigma", 0.1)?;
    let seed = opts.get_u64("seed", 0)?;
    let batch = opts.get_usize("batch", MicroTask::default().batch)?;
    let task = MicroTask { seed, sigma, batch, ..MicroTask::default() };
    let state = micro_train(&task, steps, lr)?;
    let dir = opts.out_dir()?;
    io::write_atomic(&dir.join("micro_train_loss.csv"), state.loss_csv().as_bytes())?;
    taylin_core::training::save_micro_weights(&dir.join("micro_block.ckpt"), &state.weights)?;
    println!(
        "micro-train: initial {:.6e} final {:.6e} ({:.1}% of initial), s {:.4} -> {:.4}",
        state.initial_loss,
        state.final_loss(),
        state.final_loss() / state.initial_loss * 100.0,
        0.5,
        state.weights.s
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(args: &[String]) -> Result<ExitCode, CliError> {
    let opts = Opts::parse(args, &["seed", "out-dir"])?;
    let seed = opts.get_u64("seed", 0)?;
    let table = run_ablation(&AblationSpec::default(), seed)?;
    let csv = table.to_csv();
    print!("{csv}");
    let dir = opts.out_dir()?;
    io::write_atomic(&dir.join("ablation.csv"), csv.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}
