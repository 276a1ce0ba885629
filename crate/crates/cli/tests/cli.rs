//! End-to-end tests against the compiled binary.

use std::process::{Command, Output};

fn binmoire() -> Command {
    Command::new(env!("CARGO_BIN_EXE_binmoire"))
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let out = binmoire().args(["verify", "--suite", "bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = binmoire().args(["count", "--frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sgra_suite_passes() {
    let out = binmoire().args(["verify", "--suite", "sgra"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("[PASS] interleave bijection"));
}

#[test]
fn injected_fault_fails_the_kernel_suite() {
    let out = binmoire()
        .args(["verify", "--suite", "kernels"])
        .env("BINMOIRE_INJECT_FAULT", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stdout(&out));
    assert!(stdout(&out).contains("[FAIL] xnor_conv2d"));
}

#[test]
fn bench_rejects_zero_iters() {
    let out = binmoire().args(["bench", "--iters", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tiny_bench_reports_and_passes() {
    let out = binmoire()
        .args(["bench", "--cin", "1", "--cout", "1", "--k", "1", "--hw", "16", "--iters", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("speedup"));
}

#[test]
fn demo_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&d1, &d2] {
        let out = binmoire()
            .args(["demo", "--seed", "7", "--out", d.to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
    }
    for i in 0..4 {
        for kind in ["clean", "degraded"] {
            let f = format!("pair_{i:03}_{kind}.ppm");
            assert_eq!(
                std::fs::read(d1.join(&f)).unwrap(),
                std::fs::read(d2.join(&f)).unwrap(),
                "{f}"
            );
        }
    }
}

#[test]
fn count_prints_exact_binary_ratios() {
    let out = binmoire().arg("count").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("enc0_b0.conv"));
    assert!(text.contains("150994944"));
    assert!(text.contains("2359296"));
}

#[test]
fn malformed_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[network]\nscale = 2\n").unwrap();
    let out = binmoire()
        .args(["count", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("malformed config"));

    let out = binmoire()
        .args(["count", "--config", "/nonexistent/nope.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(
        &cfg,
        "[network]\nscales = 1\nbase_channels = 4\nblocks_per_scale = 1\n\n[train]\nsteps = 3\nbatch = 1\ncrop = 32\nimage_size = 48\n",
    )
    .unwrap();
    let ckpt = dir.path().join("tiny.ckpt");
    let out = binmoire()
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--seed",
            "5",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    let log = dir.path().join("tiny.ckpt.metrics.jsonl");
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 3);
    assert!(log_text.lines().next().unwrap().contains("\"lr\""));

    // demo pair -> eval -> report with all four metrics
    let demo = dir.path().join("demo");
    binmoire()
        .args(["demo", "--seed", "3", "--out", demo.to_str().unwrap()])
        .output()
        .unwrap();
    let restored = dir.path().join("restored.ppm");
    let report = dir.path().join("report.json");
    let out = binmoire()
        .args([
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--in",
            demo.join("pair_000_degraded.ppm").to_str().unwrap(),
            "--out",
            restored.to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(restored.exists());
    let rec: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&report).unwrap().trim()).unwrap();
    for key in ["psnr_in", "psnr_out", "ssim_in", "ssim_out"] {
        assert!(rec[key].is_number(), "{key} missing: {rec}");
    }

    // corrupting the checkpoint payload must fail with a checksum message
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x20;
    std::fs::write(&ckpt, &bytes).unwrap();
    let out = binmoire()
        .args([
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--in",
            demo.join("pair_000_degraded.ppm").to_str().unwrap(),
            "--out",
            restored.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}
