//! End-to-end tests of the `cam` binary: every subcommand, byte-level
//! determinism of outputs, and the exit-code classes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cam"))
        .args(args)
        .env_remove("CAM_CACHE_DIR")
        .output()
        .expect("spawn cam")
}

fn run_ok(args: &[&str]) -> String {
    let out = cam(args);
    assert!(
        out.status.success(),
        "cam {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn exit_code(args: &[&str]) -> i32 {
    cam(args).status.code().expect("exit code")
}

/// A tiny self-contained run config; everything is sized so a full
/// train/generate/eval round trip stays in test-suite territory.
fn write_config(dir: &Path, out_dir: &Path, seed: u64) -> PathBuf {
    let text = format!(
        r#"
seed = {seed}
preset = "tiny"
out_dir = "{}"

[data]
num_sequences = 96
length = 48

[train]
total_steps = 30
batch_size = 8
context_length = 16
checkpoint_every = 20

[generation]
num_traces = 48
target_length = 32
num_steps_denoise = 6
context_window = 16

[eval]
window = 16
reference_windows = 256
background_windows = 48
draws = 2
accumulation_stride = 4
conditional_probes = 2
conditional_draws = 128
"#,
        out_dir.display()
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn gen_data_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let cfg = write_config(dir.path(), &out_a, 5);
    let cfg_s = cfg.to_str().unwrap();

    run_ok(&["gen-data", "--config", cfg_s]);
    run_ok(&["gen-data", "--config", cfg_s, "--out", out_b.to_str().unwrap()]);
    let bytes_a = read(&out_a.join("dataset.came"));
    assert_eq!(bytes_a, read(&out_b.join("dataset.came")), "same seed, same bytes");
    assert!(out_a.join("resolved-config.toml").exists());

    let ds = cam_core::data::read_embeddings(out_a.join("dataset.came")).unwrap();
    assert_eq!((ds.num_sequences(), ds.dim), (96, 8));

    let out_c = dir.path().join("c");
    run_ok(&[
        "gen-data", "--config", cfg_s, "--seed", "6", "--out", out_c.to_str().unwrap(),
    ]);
    assert_ne!(bytes_a, read(&out_c.join("dataset.came")), "seed must matter");

    assert_eq!(exit_code(&["gen-data", "--config", cfg_s, "--dim", "0"]), 2);
}

#[test]
fn train_writes_metrics_checkpoints_and_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let cfg = write_config(dir.path(), &out_a, 7);
    let cfg_s = cfg.to_str().unwrap();

    run_ok(&["train", "--config", cfg_s]);
    let csv = String::from_utf8(read(&out_a.join("metrics.csv"))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# train-metrics v1"));
    assert_eq!(lines.next(), Some("step,wall_ms,loss,grad_norm"));
    assert_eq!(lines.count(), 30, "one row per training step");
    let periodic = out_a.join("checkpoint-0000020.ckpt");
    assert!(periodic.exists(), "periodic checkpoint at step 20");
    let final_a = read(&out_a.join("checkpoint-final.ckpt"));

    // Resuming the periodic checkpoint and finishing the remaining steps
    // reproduces the uninterrupted run's final checkpoint byte for byte.
    let out_b = dir.path().join("b");
    run_ok(&[
        "train", "--config", cfg_s,
        "--out", out_b.to_str().unwrap(),
        "--resume", periodic.to_str().unwrap(),
    ]);
    assert_eq!(final_a, read(&out_b.join("checkpoint-final.ckpt")));

    // Both GIVT mode counts build and train (Table-1c variants).
    for modes in ["8", "32"] {
        let out = dir.path().join(format!("givt{modes}"));
        run_ok(&[
            "train", "--config", cfg_s,
            "--objective", "givt", "--modes", modes, "--steps", "3",
            "--out", out.to_str().unwrap(),
        ]);
    }
}

#[test]
fn generate_is_seeded_and_kinf_changes_streams() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &out, 9);
    let cfg_s = cfg.to_str().unwrap();
    run_ok(&["train", "--config", cfg_s, "--steps", "20"]);
    let ckpt = out.join("checkpoint-final.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();

    let gen_a = dir.path().join("gen-a");
    let gen_b = dir.path().join("gen-b");
    run_ok(&["generate", "--config", cfg_s, "--checkpoint", ckpt_s, "--out", gen_a.to_str().unwrap()]);
    run_ok(&["generate", "--config", cfg_s, "--checkpoint", ckpt_s, "--out", gen_b.to_str().unwrap()]);
    let traces_a = read(&gen_a.join("traces.came"));
    assert_eq!(traces_a, read(&gen_b.join("traces.came")), "fixed seed, fixed traces");

    let meta: toml::Value =
        toml::from_str(&String::from_utf8(read(&gen_a.join("traces.meta.toml"))).unwrap())
            .unwrap();
    assert_eq!(meta["model"].as_str(), Some("cam"));
    assert_eq!(meta["step_micros"].as_array().unwrap().len(), 32);

    let gen_k = dir.path().join("gen-k");
    run_ok(&[
        "generate", "--config", cfg_s, "--checkpoint", ckpt_s,
        "--k-inf", "0.02", "--out", gen_k.to_str().unwrap(),
    ]);
    assert_ne!(traces_a, read(&gen_k.join("traces.came")), "k_inf changes the streams");

    // Both ends of the solver-step sweep range run.
    for steps in ["10", "100"] {
        let out_s = dir.path().join(format!("gen-s{steps}"));
        run_ok(&[
            "generate", "--config", cfg_s, "--checkpoint", ckpt_s,
            "--num-steps", steps, "--out", out_s.to_str().unwrap(),
        ]);
    }
}

#[test]
fn eval_emits_csv_charts_and_conditional_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &out, 13);
    let cfg_s = cfg.to_str().unwrap();
    run_ok(&["gen-data", "--config", cfg_s]);
    run_ok(&["train", "--config", cfg_s, "--steps", "20"]);
    let ckpt = out.join("checkpoint-final.ckpt");
    run_ok(&["generate", "--config", cfg_s, "--checkpoint", ckpt.to_str().unwrap()]);

    let eval_dir = dir.path().join("eval");
    let stdout = run_ok(&[
        "eval", "--config", cfg_s,
        "--traces", out.join("traces.came").to_str().unwrap(),
        "--reference", out.join("dataset.came").to_str().unwrap(),
        "--checkpoint", ckpt.to_str().unwrap(),
        "--out", eval_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("conditional accuracy"), "stdout: {stdout}");

    let csv = String::from_utf8(read(&eval_dir.join("eval.csv"))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# cam-eval-csv v1"));
    assert_eq!(lines.next(), Some("model,seed,FED,FED_acc,MMD,tau"));
    let row = lines.next().unwrap();
    assert!(row.starts_with("cam,13,"), "row: {row}");
    assert_eq!(row.split(',').count(), 6);

    for chart in ["accumulation.svg", "fed.svg"] {
        let svg = String::from_utf8(read(&eval_dir.join(chart))).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{chart}");
    }
    assert!(eval_dir.join("conditional.csv").exists());
}

#[test]
fn eval_without_oracle_omits_conditional_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &out, 17);
    let cfg_s = cfg.to_str().unwrap();
    run_ok(&["gen-data", "--config", cfg_s]);
    run_ok(&["train", "--config", cfg_s, "--steps", "20"]);
    run_ok(&[
        "generate", "--config", cfg_s,
        "--checkpoint", out.join("checkpoint-final.ckpt").to_str().unwrap(),
    ]);

    // Same run config minus the oracle: process kind "none".
    let no_oracle = dir.path().join("no-oracle.toml");
    let text = fs::read_to_string(&cfg).unwrap()
        + "\n[process]\nkind = \"none\"\n";
    fs::write(&no_oracle, text).unwrap();

    let eval_dir = dir.path().join("eval");
    let stdout = run_ok(&[
        "eval", "--config", no_oracle.to_str().unwrap(),
        "--traces", out.join("traces.came").to_str().unwrap(),
        "--reference", out.join("dataset.came").to_str().unwrap(),
        "--out", eval_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("conditional metrics omitted"), "stdout: {stdout}");
    assert!(!eval_dir.join("conditional.csv").exists());
    assert!(eval_dir.join("eval.csv").exists());
}

#[test]
fn sweep_kinf_reports_grid_and_argmin() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &out, 19);
    let cfg_s = cfg.to_str().unwrap();
    run_ok(&["train", "--config", cfg_s, "--steps", "20"]);
    let ckpt = out.join("checkpoint-final.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();

    // Default grid: 6 rows, argmin reported.
    let sweep_dir = dir.path().join("sweep");
    let stdout = run_ok(&[
        "sweep-kinf", "--config", cfg_s, "--checkpoint", ckpt_s,
        "--out", sweep_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("argmin FED_acc at k_inf ="), "stdout: {stdout}");
    let csv = String::from_utf8(read(&sweep_dir.join("sweep.csv"))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# cam-sweep-csv v1"));
    assert_eq!(lines.next(), Some("k_inf,FED,FED_acc"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("0,") && rows[5].starts_with("0.05,"));
    assert!(sweep_dir.join("sweep.svg").exists());

    // A one-point grid reduces to a single evaluation row.
    let one_dir = dir.path().join("one");
    run_ok(&[
        "sweep-kinf", "--config", cfg_s, "--checkpoint", ckpt_s,
        "--grid", "0.01", "--out", one_dir.to_str().unwrap(),
    ]);
    let csv = String::from_utf8(read(&one_dir.join("sweep.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn compare_tabulates_models_and_caches_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &out, 23);
    let cfg_s = cfg.to_str().unwrap();
    let cache = dir.path().join("cache");

    let args = [
        "compare", "--config", cfg_s, "--seeds", "1",
        "--models", "cam,givt", "--steps", "12",
    ];
    let run_with_cache = || {
        let out = Command::new(env!("CARGO_BIN_EXE_cam"))
            .args(args)
            .env("CAM_CACHE_DIR", &cache)
            .output()
            .expect("spawn cam");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8_lossy(&out.stdout).into_owned()
    };

    let first = run_with_cache();
    assert!(first.contains("training 12 steps"), "stdout: {first}");
    let csv = String::from_utf8(read(&out.join("compare.csv"))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# cam-compare-csv v1"));
    assert_eq!(lines.next(), Some("model,seed,FED,FED_acc"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2, "one row per (model, seed) cell");
    assert!(rows[0].starts_with("cam,23,"), "row order follows --models: {}", rows[0]);
    assert!(rows[1].starts_with("givt,23,"), "{}", rows[1]);
    assert!(out.join("compare.svg").exists());
    assert!(cache.read_dir().unwrap().count() >= 2, "checkpoints cached");

    // Second run reuses the cache instead of retraining.
    let second = run_with_cache();
    assert!(second.contains("cached"), "stdout: {second}");
    assert!(!second.contains("training 12 steps"));
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &out, 29);
    let cfg_s = cfg.to_str().unwrap();

    // Config-class errors exit 2.
    assert_eq!(exit_code(&["train", "--config", cfg_s, "--steps", "0"]), 2);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "sead = 1").unwrap();
    assert_eq!(exit_code(&["gen-data", "--config", bad.to_str().unwrap()]), 2);

    // I/O-class errors exit 4.
    assert_eq!(exit_code(&["gen-data", "--config", "/nonexistent.toml"]), 4);
    assert_eq!(
        exit_code(&["eval", "--config", cfg_s, "--traces", "/nonexistent.came"]),
        4
    );
    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(
        exit_code(&["generate", "--config", cfg_s, "--checkpoint", garbage.to_str().unwrap()]),
        4
    );

    // Usage errors (unknown flags) are rejected by the parser.
    assert_ne!(exit_code(&["train", "--no-such-flag"]), 0);
}
