use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"{
    "seed": 0,
    "dataset": {"kind": "synthetic", "spec": {"num_classes": 2, "image_size": 16,
        "train_correlation": 0.9, "test_correlation": 0.5,
        "train_samples": 128, "test_samples": 64, "seed": 0}},
    "model": {"arch": "small-cnn", "seed": 0},
    "objective": {"kind": "dhat"},
    "loss": {"lambda1": 1.0, "lambda2": 1.0, "omega": 0.35},
    "schedule": {"epochs": 2, "base_lr": 0.05, "momentum": 0.9, "weight_decay": 0.0005,
        "decay_epochs": [], "decay_factor": 0.1, "batch_size": 64, "seed": 0},
    "aux": {"arch": "small-cnn", "schedule": {"epochs": 1, "base_lr": 0.05, "momentum": 0.9,
        "weight_decay": 0.0005, "decay_epochs": [], "decay_factor": 0.1, "batch_size": 64, "seed": 0}},
    "monitor": {"samples": 32, "attack": {"epsilon": "8/255", "step_size": "2/255", "iterations": 2}}
}"#;

const SMALL_EVAL: &str = r#"{
    "attacks": [{"epsilon": "8/255", "step_size": "2/255", "iterations": 3}],
    "gap_attack": {"epsilon": "8/255", "step_size": "2/255", "iterations": 3},
    "iou_epsilons": ["0/255", "4/255"],
    "iou_attack": {"epsilon": "4/255", "step_size": "2/255", "iterations": 3},
    "max_examples": 32,
    "export_maps": 2
}"#;

fn dhat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhat"))
        .args(args)
        .env_remove("DHAT_DETERMINISTIC")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_run(dir: &Path, name: &str, config: &Path, extra: &[&str]) -> (PathBuf, Output) {
    let out_dir = dir.join(name);
    let mut args = vec!["train", "--config", s(config), "--out", s(&out_dir)];
    args.extend_from_slice(extra);
    let out = dhat(&args);
    (out_dir, out)
}

fn eval_dir(run: &Path, eval_cfg: &Path) -> PathBuf {
    let out = dhat(&["eval", "--checkpoint", s(&run.join("checkpoint.ckpt")), "--config", s(eval_cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut dirs: Vec<PathBuf> = fs::read_dir(run)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("eval-"))
        .collect();
    dirs.sort();
    dirs.pop().unwrap()
}

#[test]
fn train_writes_artifacts_and_repeats_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY_CONFIG);
    let (a, out) = train_run(tmp.path(), "a", &cfg, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["checkpoint.ckpt", "metrics.csv", "summary.json", "config.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let (b, out) = train_run(tmp.path(), "b", &cfg, &[]);
    assert_eq!(code(&out), 0);
    let csv = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&csv).lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["finished"], true);
    assert_eq!(summary["epochs_completed"], 2);
}

#[test]
fn wall_time_is_opt_in() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", &TINY_CONFIG.replace(r#""epochs": 2"#, r#""epochs": 1"#));
    let out = Command::new(env!("CARGO_BIN_EXE_dhat"))
        .args(["train", "--config", s(&cfg), "--out", s(&tmp.path().join("r"))])
        .env("DHAT_DETERMINISTIC", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(tmp.path().join("r/metrics.csv")).unwrap();
    assert!(csv.lines().next().unwrap().ends_with("wall_time_s"));
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.json", &TINY_CONFIG.replace(r#""lambda1": 1.0"#, r#""lambda1": -1"#));
    let (_, out) = train_run(tmp.path(), "r", &bad, &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("lambda1"), "{}", stderr(&out));

    let unknown = write(tmp.path(), "unknown.json", &TINY_CONFIG.replace(r#""seed": 0,"#, r#""seed": 0, "sede": 1,"#));
    let (_, out) = train_run(tmp.path(), "r", &unknown, &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("sede"), "{}", stderr(&out));

    let (_, out) = train_run(tmp.path(), "r", &tmp.path().join("missing.json"), &[]);
    assert_eq!(code(&out), 2);

    assert_eq!(code(&dhat(&["train"])), 2);
}

#[test]
fn divergence_exits_3_and_keeps_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", &TINY_CONFIG.replace(r#""base_lr": 0.05, "momentum": 0.9, "weight_decay": 0.0005,
        "decay_epochs": [], "decay_factor": 0.1, "batch_size": 64, "seed": 0},
    "aux""#, r#""base_lr": 1e38, "momentum": 0.9, "weight_decay": 0.0005,
        "decay_epochs": [], "decay_factor": 0.1, "batch_size": 64, "seed": 0},
    "aux""#));
    let (dir, out) = train_run(tmp.path(), "r", &cfg, &[]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
    assert!(dir.join("checkpoint.ckpt").exists());
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["finished"], false);
}

#[test]
fn resume_continues_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY_CONFIG);
    let (full, out) = train_run(tmp.path(), "full", &cfg, &[]);
    assert_eq!(code(&out), 0);
    let (part, out) = train_run(tmp.path(), "part", &cfg, &["--stop-after", "1"]);
    assert_eq!(code(&out), 0);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(part.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["finished"], false);
    let ckpt = part.join("checkpoint.ckpt");
    let (_, out) = train_run(tmp.path(), "part", &cfg, &["--checkpoint", s(&ckpt)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(part.join("metrics.csv")).unwrap(), fs::read(full.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(part.join("checkpoint.ckpt")).unwrap(), fs::read(full.join("checkpoint.ckpt")).unwrap());

    let changed = write(tmp.path(), "c2.json", &TINY_CONFIG.replace(r#""lambda1": 1.0"#, r#""lambda1": 0.5"#));
    let (_, out) = train_run(tmp.path(), "other", &changed, &["--checkpoint", s(&ckpt)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("hash"), "{}", stderr(&out));
}

#[test]
fn eval_writes_report_and_compare_handles_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY_CONFIG);
    let eval_cfg = write(tmp.path(), "e.json", SMALL_EVAL);
    let (run, out) = train_run(tmp.path(), "run", &cfg, &[]);
    assert_eq!(code(&out), 0);
    let report_dir = eval_dir(&run, &eval_cfg);
    for f in [
        "report.json",
        "robust_accuracy.csv",
        "robust_gap.csv",
        "iou.csv",
        "robust_accuracy.svg",
        "iou_vs_epsilon.svg",
        "learning_curves.svg",
        "attention/attention_000.png",
    ] {
        let p = report_dir.join(f);
        assert!(fs::metadata(&p).map(|m| m.len() > 0).unwrap_or(false), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["objective"], "dhat");
    assert_eq!(report["test_examples"], 32);

    let cmp = tmp.path().join("cmp");
    let out = dhat(&["compare", s(&run), s(&run), "--out", s(&cmp)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let deltas = fs::read_to_string(cmp.join("deltas.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(deltas.as_bytes());
    let mut n = 0;
    for r in rows.records() {
        assert_eq!(r.unwrap()[3].parse::<f64>().unwrap(), 0.0);
        n += 1;
    }
    assert!(n > 0);

    let (part, out) = train_run(tmp.path(), "part", &cfg, &["--stop-after", "1"]);
    assert_eq!(code(&out), 0);
    let (fresh, out) = train_run(tmp.path(), "fresh", &cfg, &[]);
    assert_eq!(code(&out), 0);
    let out = dhat(&["compare", s(&run), s(&part), s(&fresh), "--out", s(&cmp)]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("part") && err.contains("fresh"), "{err}");
}

#[test]
fn eval_errors_are_user_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dhat(&["eval", "--checkpoint", s(&tmp.path().join("nope.ckpt"))]);
    assert_eq!(code(&out), 2);

    let cfg = write(tmp.path(), "c.json", &TINY_CONFIG.replace(r#""epochs": 2"#, r#""epochs": 1"#));
    let (run, out) = train_run(tmp.path(), "run", &cfg, &[]);
    assert_eq!(code(&out), 0);
    let echo = fs::read_to_string(run.join("config.json")).unwrap();
    fs::write(run.join("config.json"), echo.replace("\"lambda1\": 1.0", "\"lambda1\": 0.25")).unwrap();
    let out = dhat(&["eval", "--checkpoint", s(&run.join("checkpoint.ckpt"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("does not match"), "{}", stderr(&out));
}

#[test]
fn zero_radius_eval_reports_clean_accuracy_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", &TINY_CONFIG.replace(r#""epochs": 2"#, r#""epochs": 1"#));
    let (run, out) = train_run(tmp.path(), "run", &cfg, &[]);
    assert_eq!(code(&out), 0);
    let zero = write(
        tmp.path(),
        "zero.json",
        r#"{"attacks": [{"epsilon": "0/255", "step_size": "2/255", "iterations": 10}],
            "gap_attack": {"epsilon": "0/255", "step_size": "2/255", "iterations": 10},
            "export_maps": 0}"#,
    );
    let dir = eval_dir(&run, &zero);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert!(report["clean_acc"].is_number());
    assert_eq!(report["robust"], serde_json::json!([]));
    assert!(report.get("robust_gap").is_none() && report.get("iou").is_none());
}

#[test]
fn gen_data_exports_and_honours_seed_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY_CONFIG);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&dhat(&["gen-data", "--config", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(code(&dhat(&["gen-data", "--config", s(&cfg), "--out", s(&b), "--seed-override", "9"])), 0);
    let ma: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let mb: serde_json::Value = serde_json::from_slice(&fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(mb["spec"]["seed"], 9);
    assert_ne!(ma["files"], mb["files"]);
    assert!(a.join("train_images.npy").exists());

    let exported = TINY_CONFIG.replace(
        r#"{"kind": "synthetic", "spec": {"num_classes": 2, "image_size": 16,
        "train_correlation": 0.9, "test_correlation": 0.5,
        "train_samples": 128, "test_samples": 64, "seed": 0}}"#,
        &format!(r#"{{"kind": "exported", "path": {:?}}}"#, s(&a)),
    );
    assert!(exported.contains("exported"));
    let cfg2 = write(tmp.path(), "c2.json", &exported.replace(r#""epochs": 2"#, r#""epochs": 1"#));
    let cfg1 = write(tmp.path(), "c1.json", &TINY_CONFIG.replace(r#""epochs": 2"#, r#""epochs": 1"#));
    let (r1, out) = train_run(tmp.path(), "r1", &cfg1, &[]);
    assert_eq!(code(&out), 0);
    let (r2, out) = train_run(tmp.path(), "r2", &cfg2, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(r1.join("metrics.csv")).unwrap(), fs::read(r2.join("metrics.csv")).unwrap());
}

#[test]
fn shipped_configs_are_valid() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dhat_cfg = dhat::config::ExperimentConfig::from_path(&root.join("desk_dhat.json")).unwrap();
    let uiat_cfg = dhat::config::ExperimentConfig::from_path(&root.join("desk_uiat.json")).unwrap();
    assert_eq!(dhat_cfg.objective, dhat::config::Objective::Dhat);
    assert_eq!(uiat_cfg.objective, dhat::config::Objective::UiatStyle { lambda: 1.0 });
    assert_eq!(dhat_cfg.schedule, uiat_cfg.schedule);
    dhat::config::EvalConfig::from_path(&root.join("eval.json")).unwrap();
}
