//! End-to-end runs of the `preprompt` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_preprompt"));
    c.env("PREPROMPT_LOG", "error");
    c
}

fn ci_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ci-synthetic.toml")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn ci(args: &[&str], out: &Path) -> Output {
    let config = ci_config();
    let mut all = vec!["-c", config.to_str().unwrap()];
    all.extend_from_slice(args);
    all.extend_from_slice(&["--output-dir", out.to_str().unwrap()]);
    run(&all)
}

fn data_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(String::from).collect()
}

#[test]
fn help_exits_zero_everywhere() {
    for sub in [None, Some("pretrain"), Some("run"), Some("ablate"), Some("report"), Some("export-embeddings")] {
        let mut args: Vec<&str> = sub.into_iter().collect();
        args.push("--help");
        let o = run(&args);
        assert_eq!(code(&o), 0, "{args:?}: {}", text(&o));
        assert!(text(&o).contains("Usage"), "{args:?}");
    }
}

#[test]
fn usage_errors_exit_two() {
    for args in [&["frobnicate"][..], &["run", "--no-such-flag"], &["run", "--method", "l2p"], &[]] {
        let o = run(args);
        assert_eq!(code(&o), 2, "{args:?}: {}", text(&o));
    }
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let o = run(&["-c", missing.to_str().unwrap(), "run"]);
    assert_eq!(code(&o), 1, "{}", text(&o));
    assert!(text(&o).contains("missing.toml"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[learner]\nlength = 0\n").unwrap();
    let o = run(&["-c", bad.to_str().unwrap(), "run"]);
    assert_eq!(code(&o), 1, "{}", text(&o));

    let o = run(&["report", "--output-dir", dir.path().join("empty").to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", text(&o));
}

#[test]
fn run_writes_one_summary_row_per_seed_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let o = ci(&["run", "--seeds", "0,1"], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    let method_dir = dir.path().join("preprompt");
    let summary = method_dir.join("summary.csv");
    let header = std::fs::read_to_string(&summary).unwrap();
    assert!(header.starts_with("method,seed,A_T,A_bar,F_T"), "{header}");
    let rows = data_rows(&summary);
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("preprompt,0,") && rows[1].starts_with("preprompt,1,"));
    assert!(method_dir.join("matrix.csv").exists());
    assert!(method_dir.join("report.json").exists());
    assert!(method_dir.join("state-seed0.ppst").exists());

    // identical inputs rewrite identical bytes
    let snapshot = |p: &Path| std::fs::read(p).unwrap();
    let files = ["summary.csv", "matrix.csv", "report.json", "state-seed1.ppst"].map(|f| method_dir.join(f));
    let before: Vec<Vec<u8>> = files.iter().map(|p| snapshot(p)).collect();
    let o = ci(&["run", "--seeds", "0,1"], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    let after: Vec<Vec<u8>> = files.iter().map(|p| snapshot(p)).collect();
    assert_eq!(before, after);
}

#[test]
fn baselines_run_by_name() {
    let dir = tempfile::tempdir().unwrap();
    for m in ["finetune", "kv-correlation"] {
        let o = ci(&["run", "--method", m, "--seeds", "0", "--no-state"], dir.path());
        assert_eq!(code(&o), 0, "{m}: {}", text(&o));
        assert_eq!(data_rows(&dir.path().join(m).join("summary.csv")).len(), 1);
        assert!(!dir.path().join(m).join("state-seed0.ppst").exists());
    }
}

#[test]
fn ablate_prints_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = ci(&["ablate", "--seeds", "0", "--prompt-epochs", "5"], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert!(lines[0].contains("P_pred") && lines[0].contains("L_ft"), "{stdout}");
    assert_eq!(lines.len(), 7, "{stdout}");
    for (r, line) in lines[1..].iter().enumerate() {
        assert!(line.starts_with(&r.to_string()), "{line}");
        assert!(line.contains('±'));
    }
    let rows = data_rows(&dir.path().join("ablate/summary.csv"));
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("row0-000,") && rows[5].starts_with("row5-111,"), "{rows:?}");
}

#[test]
fn report_aggregates_seeds_as_mean_and_std() {
    let dir = tempfile::tempdir().unwrap();
    let o = ci(&["run", "--seeds", "0,1,2", "--no-state", "--prompt-epochs", "5"], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    let o = ci(&["report"], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    let stdout = String::from_utf8_lossy(&o.stdout).to_string();
    let line = stdout.lines().find(|l| l.starts_with("preprompt")).expect("preprompt row");
    assert!(line.contains('±'), "{line}");
    assert!(stdout.contains("384000"), "{stdout}");
    assert_eq!(std::fs::read_to_string(dir.path().join("report.txt")).unwrap(), stdout);
}

#[test]
fn pretrain_then_export_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bb.ppvt");
    let config = ci_config();
    let o = run(&["-c", config.to_str().unwrap(), "pretrain", "--out", ckpt.to_str().unwrap(), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(ckpt.exists());

    let o = ci(&["run", "--seeds", "0", "--backbone", ckpt.to_str().unwrap(), "--prompt-epochs", "5"], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    let state = dir.path().join("preprompt/state-seed0.ppst");
    let csv = dir.path().join("emb.csv");
    let o = run(&[
        "-c",
        config.to_str().unwrap(),
        "export-embeddings",
        "--state",
        state.to_str().unwrap(),
        "-o",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let body = std::fs::read_to_string(&csv).unwrap();
    let mut lines = body.lines();
    assert!(lines.next().unwrap().starts_with("kind,index,label,predicted_task,f0"));
    let samples = body.lines().filter(|l| l.starts_with("sample,")).count();
    let means = body.lines().filter(|l| l.starts_with("mean,")).count();
    // 10 classes x 10 test images, all learned by the end of the run
    assert_eq!((samples, means), (100, 10));
}
