//! End-to-end checks of the `casa-lab` binary: the exit-code contract,
//! output schemas, artifact files, and seed determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_casa-lab"))
}

fn run(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.args(args).env_remove("CASA_LAB_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).expect("config written");
    path.to_string_lossy().into_owned()
}

const TINY_STREAM: &str = r#"{
  "schema": 1,
  "seed": 7,
  "model": { "d_model": 16, "n_heads": 2, "n_layers": 2, "vocab_size": 24,
             "mode": { "kind": "casa-parallel" } },
  "stream": { "frames": 6, "frame_rows": 2, "text_per_frame": 2, "reps": 1 }
}"#;

const TINY_TRAIN: &str = r#"{
  "schema": 1,
  "seed": 0,
  "model": { "d_model": 16, "n_heads": 2, "n_layers": 2 },
  "data": { "grid": 2, "n_colors": 3, "n_windows": 2, "n_train": 24, "n_eval": 8 },
  "train": { "steps": 4, "batch": 4, "eval_every": 4 }
}"#;

// ── Exit-code contract ──────────────────────────────────────────────────

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    assert_eq!(code(&run(&["frobnicate"], &[])), 2);
    assert_eq!(code(&run(&["verify", "--bogus"], &[])), 2);
}

#[test]
fn config_violations_exit_2_and_missing_files_exit_3() {
    let dir = tempdir("exitcodes");
    let bad_schema = write_cfg(&dir, "s.json", r#"{"schema": 2}"#);
    let unknown_key = write_cfg(&dir, "k.json", r#"{"schema": 1, "modell": {}}"#);
    let unknown_nested =
        write_cfg(&dir, "n.json", r#"{"schema": 1, "model": {"d_model": 8, "n_heads": 2, "n_layers": 1, "d_modell": 3}}"#);
    assert_eq!(code(&run(&["stream", "--config", &bad_schema], &[])), 2);
    assert_eq!(code(&run(&["stream", "--config", &unknown_key], &[])), 2);
    assert_eq!(code(&run(&["stream", "--config", &unknown_nested], &[])), 2);
    let missing = dir.join("nope.json").to_string_lossy().into_owned();
    assert_eq!(code(&run(&["stream", "--config", &missing], &[])), 3);
}

#[test]
fn bad_suite_bad_mode_and_bad_env_seed_exit_2() {
    let dir = tempdir("badargs");
    let cfg = write_cfg(&dir, "t.json", TINY_STREAM);
    assert_eq!(code(&run(&["verify", "--suite", "bogus"], &[])), 2);
    assert_eq!(code(&run(&["stream", "--config", &cfg, "--mode", "warp-drive"], &[])), 2);
    assert_eq!(code(&run(&["stream", "--config", &cfg], &[("CASA_LAB_SEED", "abc")])), 2);
}

// ── verify ──────────────────────────────────────────────────────────────

#[test]
fn verify_masks_exits_0_with_junit_json() {
    let out = run(&["verify", "--suite", "masks"], &[]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("stdout is JSON");
    assert_eq!(doc["format"], "junit-json");
    assert_eq!(doc["failures"], 0);
    assert_eq!(doc["suites"][0]["name"], "masks");
    assert!(doc["tests"].as_u64().unwrap() >= 5);
}

// ── stream ──────────────────────────────────────────────────────────────

#[test]
fn stream_emits_pinned_ledger_schema_with_constant_window_cache() {
    let dir = tempdir("stream");
    let cfg = write_cfg(&dir, "t.json", TINY_STREAM);
    let out = run(
        &["--out", dir.to_str().unwrap(), "stream", "--config", &cfg, "--frames", "5"],
        &[],
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = stdout(&out);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,event_kind,text_kv_scalars,casa_window_scalars,peak_scratch_scalars,wall_ms"
    );
    // 5 frames x (1 image + 2 text events).
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 15);
    // Every image ingest refills the window cache to the same size.
    let image_caches: Vec<&str> = rows
        .iter()
        .filter(|r| r.split(',').nth(1) == Some("image"))
        .map(|r| r.split(',').nth(3).unwrap())
        .collect();
    assert_eq!(image_caches.len(), 5);
    assert!(image_caches.iter().all(|c| c == &image_caches[0]));
    let artifact = std::fs::read_to_string(dir.join("ledger.csv")).expect("artifact");
    assert_eq!(artifact.trim_end_matches('\n'), csv.trim_end_matches('\n'));
}

#[test]
fn stream_is_deterministic_under_the_env_seed() {
    let dir = tempdir("seed");
    let cfg = write_cfg(&dir, "t.json", TINY_STREAM);
    let fixed = |s: &str| {
        let out = run(&["stream", "--config", &cfg], &[("CASA_LAB_SEED", s)]);
        assert_eq!(code(&out), 0);
        // Wall times jitter; compare everything but the last column.
        stdout(&out)
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(fixed("42"), fixed("42"));
}

// ── cost ────────────────────────────────────────────────────────────────

#[test]
fn cost_default_layout_prints_the_worked_insertion_figure() {
    let dir = tempdir("cost");
    let out = run(&["--out", dir.to_str().unwrap(), "cost", "--trials", "1"], &[]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("115347600"), "missing worked figure in:\n{text}");
    assert!(text.contains("(T+N)^2"));
    assert!(text.contains("max(T^2, N*W^2)"));
    let csv = std::fs::read_to_string(dir.join("cost.csv")).expect("artifact");
    assert!(csv.starts_with("mode,T,N,T_W,W,symbolic,exact_entries,scratch_scalars,wall_us"));
}

#[test]
fn cost_accepts_inline_and_file_layouts_and_rejects_garbage() {
    let dir = tempdir("layouts");
    let out = run(&["cost", "--layout", "2x8:4", "--trials", "1"], &[]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("T=8 text, N=16 image tokens"));

    let file = write_cfg(&dir, "layout.json", "[[8, 4], [6, 2]]");
    let out = run(&["cost", "--layout", &file, "--trials", "1"], &[]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("T=6 text, N=14 image tokens"));

    assert_eq!(code(&run(&["cost", "--layout", "pears"], &[])), 2);
}

// ── train + probe ───────────────────────────────────────────────────────

#[test]
fn train_writes_metrics_and_a_probeable_checkpoint() {
    let dir = tempdir("train");
    let cfg = write_cfg(&dir, "t.json", TINY_TRAIN);
    let out = run(
        &["--out", dir.to_str().unwrap(), "train", "--config", &cfg, "--mode", "casa-pre"],
        &[],
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("step,loss,acc_color,acc_recall"));
    assert!(dir.join("metrics.csv").exists());
    assert!(dir.join("checkpoint.bin").exists());
    assert!(dir.join("checkpoint.json").exists());

    let ckpt = dir.join("checkpoint").to_string_lossy().into_owned();
    let ablate = run(&["probe", "--checkpoint", &ckpt, "--kind", "ablate", "--config", &cfg], &[]);
    assert_eq!(code(&ablate), 0, "stderr: {}", String::from_utf8_lossy(&ablate.stderr));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&ablate)).expect("JSON");
    assert_eq!(doc["probe"], "ablate");
    for rule in ["mask-self", "mask-random-text", "mask-random-any"] {
        assert!(doc["rules"][rule]["combined_accuracy"].is_number(), "missing {rule}");
    }

    let stats = run(&["probe", "--checkpoint", &ckpt, "--kind", "stats", "--config", &cfg], &[]);
    assert_eq!(code(&stats), 0);
    let doc: serde_json::Value = serde_json::from_str(&stdout(&stats)).expect("JSON");
    let groups: Vec<&str> =
        doc["groups"].as_array().unwrap().iter().map(|g| g[0].as_str().unwrap()).collect();
    assert!(groups.contains(&"self") && groups.contains(&"other_text"), "groups: {groups:?}");

    let grad = run(&["probe", "--checkpoint", &ckpt, "--kind", "grad", "--config", &cfg], &[]);
    assert_eq!(code(&grad), 0, "stderr: {}", String::from_utf8_lossy(&grad.stderr));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&grad)).expect("JSON");
    assert_eq!(doc["pass"], true);
}

#[test]
fn probe_without_matching_task_shape_exits_2() {
    let dir = tempdir("mismatch");
    let cfg = write_cfg(&dir, "t.json", TINY_TRAIN);
    let out = run(
        &["--out", dir.to_str().unwrap(), "train", "--config", &cfg],
        &[],
    );
    assert_eq!(code(&out), 0);
    let ckpt = dir.join("checkpoint").to_string_lossy().into_owned();
    // Default task shape (4x4 grid, 6 colors) has a different vocabulary.
    let out = run(&["probe", "--checkpoint", &ckpt, "--kind", "stats"], &[]);
    assert_eq!(code(&out), 2);
}

// ── bench ───────────────────────────────────────────────────────────────

#[test]
fn bench_reports_every_mode_with_zero_params_for_replacement() {
    let dir = tempdir("bench");
    let cfg = write_cfg(&dir, "t.json", TINY_STREAM);
    let out = run(&["bench", "--config", &cfg, "--trials", "1"], &[]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("JSON");
    let reports = doc.as_array().unwrap();
    assert_eq!(reports.len(), 6);
    let by_mode = |m: &str| {
        reports
            .iter()
            .find(|r| r["mode"] == m)
            .unwrap_or_else(|| panic!("mode {m} missing"))
    };
    assert_eq!(by_mode("casa-replace")["params_added"], 0);
    assert!(by_mode("casa-parallel")["params_added"].as_u64().unwrap() > 0);
    assert!(by_mode("insertion")["rows"].as_array().unwrap().len() >= 2);
}

// ── helpers ─────────────────────────────────────────────────────────────

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("casa-cli-test-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("tempdir");
    dir
}
