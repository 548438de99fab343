use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qwha_core::quantizer::{clamped_mask, read_quantized};
use qwha_core::synth::excess_kurtosis;
use qwha_core::tensor_io::{read_matrix, write_matrix};
use qwha_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;
use tempfile::TempDir;

fn qwha(args: &[&str], paths: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qwha"));
    cmd.args(args);
    for (flag, path) in paths {
        cmd.arg(flag).arg(path);
    }
    cmd.output().expect("spawn qwha")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("data");
    let mut args = vec!["synth", "--d-out", "64", "--d-in", "128", "--samples", "256"];
    args.extend_from_slice(extra);
    ok(qwha(&args, &[("--out-dir", &out)]));
    out
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn quantize_writes_error_within_half_step() {
    let dir = TempDir::new().unwrap();
    let w = gaussian(64, 64, 1);
    let wp = dir.path().join("w.sadp");
    write_matrix(&w, &wp).unwrap();
    let (qp, ep) = (dir.path().join("q.sadq"), dir.path().join("e.sadp"));
    ok(qwha(
        &["quantize", "--bits", "4", "--group-size", "64"],
        &[("--weights", &wp), ("--out", &qp), ("--error-out", &ep)],
    ));
    let q = read_quantized(&qp).unwrap();
    let err = read_matrix(&ep).unwrap();
    let clamped = clamped_mask(&w, &q);
    for i in 0..64 {
        for j in 0..64 {
            if !clamped[i * 64 + j] {
                let (s, _) = q.group_params(i, j);
                assert!(err[(i, j)].abs() <= s / 2.0 + 1e-12);
            }
        }
    }
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let wp = dir.path().join("w.sadp");
    write_matrix(&gaussian(4, 8, 2), &wp).unwrap();
    let (qp, ep) = (dir.path().join("q.sadq"), dir.path().join("e.sadp"));

    let one_bit = qwha(&["quantize", "--bits", "1"], &[("--weights", &wp), ("--out", &qp), ("--error-out", &ep)]);
    assert_eq!(one_bit.status.code(), Some(2));

    let missing = dir.path().join("absent.sadp");
    let out = qwha(&["quantize"], &[("--weights", &missing), ("--out", &qp), ("--error-out", &ep)]);
    assert_eq!(out.status.code(), Some(3));

    let garbage = dir.path().join("garbage.sadp");
    std::fs::write(&garbage, b"not a matrix file").unwrap();
    let out = qwha(&["quantize"], &[("--weights", &garbage), ("--out", &qp), ("--error-out", &ep)]);
    assert!(matches!(out.status.code(), Some(2) | Some(3)));

    let bench = qwha(&["bench", "--sizes", "8", "--repeats", "0"], &[]);
    assert_eq!(bench.status.code(), Some(2));

    let threads = qwha(&["--threads", "0", "bench", "--sizes", "8"], &[]);
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn budget_flags_are_exclusive() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), &[]);
    let out = qwha(
        &["pipeline", "--p", "100", "--rank-equivalent", "4"],
        &[
            ("--weights", &data.join("weights.sadp")),
            ("--activations", &data.join("activations.sadp")),
            ("--out-dir", &dir.path().join("run")),
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_is_reproducible_and_heavy_tailed() {
    let dir = TempDir::new().unwrap();
    let a = synth(&dir.path().join("a"), &["--seed", "5"]);
    let b = synth(&dir.path().join("b"), &["--seed", "5"]);
    for f in ["weights.sadp", "activations.sadp"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let spiky = read_matrix(a.join("weights.sadp")).unwrap();
    let plain = synth(&dir.path().join("c"), &["--seed", "5", "--spike-fraction", "0"]);
    let plain = read_matrix(plain.join("weights.sadp")).unwrap();
    assert!(excess_kurtosis(&spiky) > 1.0);
    assert!(excess_kurtosis(&plain).abs() < 0.5);

    let meta = report(&a.join("synth.json"));
    assert_eq!(meta["config"]["seed"], 5);
    assert_eq!(meta["spike_count"], 82);

    let bad = qwha(&["synth", "--spike-fraction", "1.5"], &[("--out-dir", &dir.path().join("d"))]);
    assert_eq!(bad.status.code(), Some(2));
}

fn pipeline(data: &Path, out: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["pipeline", "--bits", "2"];
    args.extend_from_slice(extra);
    ok(qwha(
        &args,
        &[
            ("--weights", &data.join("weights.sadp")),
            ("--activations", &data.join("activations.sadp")),
            ("--out-dir", out),
        ],
    ));
    report(&out.join("report.json"))
}

#[test]
fn full_budget_pipeline_removes_error() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), &[]);
    let run = dir.path().join("run");
    let r = pipeline(&data, &run, &["--p", &(64 * 128).to_string()]);
    let pre = r["analysis"]["pre_error"].as_f64().unwrap();
    let post = r["analysis"]["post_error"].as_f64().unwrap();
    assert!(post <= 1e-8 * pre, "pre {pre} post {post}");
    for f in ["quantized.sadq", "error.sadp", "calib.sadp", "calib.sadp.json", "adapter.sada", "report.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let times = &r["wall_times"];
    for stage in ["quantize_s", "calibrate_s", "init_s", "eval_s"] {
        assert!(times[stage].as_f64().unwrap() >= 0.0);
    }
    assert_eq!(r["config"]["seed"], 0);
}

#[test]
fn adaalloc_beats_random_on_most_seeds() {
    let dir = TempDir::new().unwrap();
    let mut wins = 0;
    for seed in 0..5u64 {
        let s = seed.to_string();
        let data = synth(&dir.path().join(format!("d{seed}")), &["--seed", &s]);
        let err = |strategy: &str| {
            let out = dir.path().join(format!("{strategy}{seed}"));
            let r = pipeline(&data, &out, &["--rank-equivalent", "4", "--strategy", strategy, "--seed", &s]);
            r["analysis"]["post_error"].as_f64().unwrap()
        };
        if err("adaalloc") <= err("random") {
            wins += 1;
        }
    }
    assert!(wins >= 3, "AdaAlloc won {wins}/5");
}

#[test]
fn init_eval_and_compare_agree() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), &["--seed", "3"]);
    let p = dir.path();
    let (q, e, c, a) = (p.join("q.sadq"), p.join("e.sadp"), p.join("c.sadp"), p.join("a.sada"));
    ok(qwha(
        &["quantize", "--bits", "2"],
        &[("--weights", &data.join("weights.sadp")), ("--out", &q), ("--error-out", &e)],
    ));
    ok(qwha(&["calibrate"], &[("--activations", &data.join("activations.sadp")), ("--out", &c)]));
    let init_report = p.join("init.json");
    ok(qwha(
        &["init", "--rank-equivalent", "4", "--strategy", "ssh", "--seed", "9"],
        &[("--error", &e), ("--calib", &c), ("--out", &a), ("--report", &init_report)],
    ));
    let init = report(&init_report);
    assert_eq!(init["seed"], 9);
    assert_eq!(init["budget"], 4 * (64 + 128));

    let eval_json = p.join("eval.json");
    ok(qwha(
        &["eval"],
        &[("--error", &e), ("--calib", &c), ("--adapter", &a), ("--out-json", &eval_json)],
    ));
    let eval = report(&eval_json);
    let post = eval[0]["post_error"].as_f64().unwrap();
    let expected = init["post_objective"].as_f64().unwrap().sqrt();
    assert!((post - expected).abs() <= 1e-9 * expected);

    let csv_path = p.join("grid.csv");
    ok(qwha(
        &["compare", "--rank-equivalent", "4", "--strategies", "adaalloc,magnitude", "--svd-rank", "4"],
        &[("--error", &e), ("--calib", &c), ("--out-csv", &csv_path)],
    ));
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3 * 2 + 1);
    let method = reader.headers().unwrap().iter().position(|h| h == "method").unwrap();
    assert_eq!(&rows[6][method], "svd-rank-4");
}

#[test]
fn bench_reports_speedup_and_skips_unsupported_sizes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bench.csv");
    ok(qwha(&["bench", "--sizes", "8,12,6", "--repeats", "5"], &[("--out", &out)]));
    let mut reader = csv::Reader::from_path(&out).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0][col("speedup")].parse::<f64>().unwrap() > 0.0);
    assert!(rows[0][col("max_rel_error")].parse::<f64>().unwrap() <= 1e-10);
    assert!(rows[2][col("note")].starts_with("skipped"));
    assert!(rows[2][col("speedup")].is_empty());
}
