//! End-to-end tests of the binary: exit codes, file outputs, the PPM
//! restoration contract, and the fault-injection self-test.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_taylin")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("taylin_cli_{name}"));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_ppm(path: &Path, w: usize, h: usize) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            bytes.push((x * 17 % 256) as u8);
            bytes.push((y * 31 % 256) as u8);
            bytes.push(((x + y) * 7 % 256) as u8);
        }
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["verify"]).status.code(), Some(2));
    assert_eq!(run(&["verify", "nonsense"]).status.code(), Some(2));
    assert_eq!(run(&["bench", "--op", "bogus"]).status.code(), Some(2));
}

#[test]
fn io_errors_exit_3() {
    let out = run(&["restore", "--input", "/nonexistent/x.ppm", "--output", "/tmp/y.ppm"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn verify_passes_and_fault_injection_fails() {
    let ok = run(&["verify", "kernel", "--seed", "2"]);
    assert_eq!(ok.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&ok.stderr));
    let stdout = String::from_utf8(ok.stdout).unwrap();
    assert!(stdout.lines().all(|l| l.contains("\"status\":\"pass\"")));

    let bad = run(&["verify", "kernel", "--seed", "2", "--inject-fault", "phi-sign"]);
    assert_eq!(bad.status.code(), Some(1));
    let stdout = String::from_utf8(bad.stdout).unwrap();
    assert!(stdout.contains("\"status\":\"fail\""));
}

#[test]
fn verify_report_file_is_written_atomically() {
    let dir = tmp_dir("report");
    let out = run(&["verify", "gradients", "--seed", "3", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let report = dir.join("verify_gradients_seed3.jsonl");
    let content = std::fs::read_to_string(&report).unwrap();
    assert_eq!(content.as_bytes(), &out.stdout[..]);
    // no stray temp file
    assert!(!dir.join("verify_gradients_seed3.jsonl.tmp").exists());
}

#[test]
fn restore_zero_checkpoint_is_pixel_identity() {
    let dir = tmp_dir("identity");
    let input = dir.join("in.ppm");
    let output = dir.join("out.ppm");
    write_ppm(&input, 32, 24);
    let out = run(&[
        "restore",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--config",
        "nano",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&output).unwrap());
}

#[test]
fn restore_pads_and_crops_non_divisible_input() {
    let dir = tmp_dir("pad");
    let input = dir.join("in30.ppm");
    let output = dir.join("out30.ppm");
    write_ppm(&input, 30, 26);
    let out = run(&[
        "restore",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--config",
        "nano",
        "--random-init",
        "true",
        "--seed",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let bytes = std::fs::read(&output).unwrap();
    assert!(bytes.starts_with(b"P6\n30 26\n255\n"));
    assert_eq!(bytes.len(), b"P6\n30 26\n255\n".len() + 3 * 30 * 26);
}

#[test]
fn restore_checkpoint_roundtrip_reproduces_output() {
    let dir = tmp_dir("ckpt");
    let input = dir.join("in.ppm");
    write_ppm(&input, 16, 16);
    let ckpt = dir.join("model.ckpt");
    let out_a = dir.join("a.ppm");
    let out_b = dir.join("b.ppm");
    let first = run(&[
        "restore",
        "--input",
        input.to_str().unwrap(),
        "--output",
        out_a.to_str().unwrap(),
        "--random-init",
        "true",
        "--seed",
        "11",
        "--save-checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(first.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&first.stderr));
    let second = run(&[
        "restore",
        "--input",
        input.to_str().unwrap(),
        "--output",
        out_b.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(second.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&second.stderr));
    assert_eq!(std::fs::read(&out_a).unwrap(), std::fs::read(&out_b).unwrap());
}

#[test]
fn restore_accepts_config_file() {
    let dir = tmp_dir("cfgfile");
    let cfg_path = dir.join("model.cfg");
    // nano config written through the documented text format
    let text = "branches = 2,2,2,2,2,2,2,2\nblocks = 1,1,1,1,1,1,1,1\n\
                channels = 8,16,24,32,24,16,8,8\nbase_channels = 8\nheads_divisor = 8\n\
                focused_factor = 4\nmodulation = 0.5\nepsilon = 1e-6\noffset_bound = 3\n\
                embed_kernel = 3\ncpe_kernels = 3,5\nbias_free = false\n";
    std::fs::write(&cfg_path, text).unwrap();
    let input = dir.join("in.ppm");
    write_ppm(&input, 16, 16);
    let out = run(&[
        "restore",
        "--input",
        input.to_str().unwrap(),
        "--output",
        dir.join("out.ppm").to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn attn_map_emits_deterministic_pgm_files() {
    let dir = tmp_dir("maps");
    let out = run(&[
        "attn-map",
        "--probe",
        "fig",
        "--p",
        "3,8",
        "--s",
        "0,0.5",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    for name in ["attn_fig_p3_s0.pgm", "attn_fig_p8_s0.pgm", "attn_fig_p3_s0.5.pgm", "attn_fig_p8_s0.5.pgm"] {
        let bytes = std::fs::read(dir.join(name)).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"), "{name} header");
        assert_eq!(bytes.len(), b"P5\n4 4\n255\n".len() + 16, "{name} payload");
    }
    // remainder on: strictly higher max weight in the query row
    let stdout = String::from_utf8(out.stdout).unwrap();
    let weight = |needle: &str| -> f64 {
        stdout
            .lines()
            .find(|l| l.starts_with(needle))
            .and_then(|l| l.rsplit_once('=').map(|(_, v)| v.parse().unwrap()))
            .unwrap()
    };
    assert!(weight("attn_fig_p3_s0.5.pgm") > weight("attn_fig_p3_s0.pgm"));
}

#[test]
fn bench_writes_csv_and_svg() {
    let dir = tmp_dir("bench");
    let out = run(&[
        "bench",
        "--op",
        "noop",
        "--reps",
        "3",
        "--format",
        "csv",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("scaling_const_probe.csv")).unwrap();
    assert!(csv.starts_with("kernel,n,median_secs,slope,residual"));
    assert_eq!(csv.lines().count(), 5);

    let out = run(&[
        "bench",
        "--op",
        "noop",
        "--reps",
        "3",
        "--format",
        "svg",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let svg = std::fs::read_to_string(dir.join("scaling_const_probe.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn micro_train_writes_loss_history() {
    let dir = tmp_dir("train");
    let out = run(&[
        "micro-train",
        "--steps",
        "3",
        "--lr",
        "0.1",
        "--seed",
        "4",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("micro_train_loss.csv")).unwrap();
    assert!(csv.starts_with("step,eval_loss"));
    assert_eq!(csv.lines().count(), 5); // header + initial + 3 steps
}

#[test]
fn ablate_writes_table() {
    let dir = tmp_dir("ablate");
    let out = run(&["ablate", "--seed", "2", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("ablation.csv")).unwrap();
    assert!(csv.contains("offset_bound_none"));
    assert!(csv.contains("attention_p8"));
}

#[test]
fn macs_prints_pinned_values() {
    let out = run(&["macs", "--h", "16", "--w", "16", "--d", "8", "--k", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("1114112"));
    assert!(stdout.contains("204800"));
}
