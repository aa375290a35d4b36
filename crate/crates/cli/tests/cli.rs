use std::path::Path;
use std::process::{Command, Output};

use alece_core::bench::ESTIMATE_FILE_FORMAT;

fn alece(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alece"))
        .args(args)
        .output()
        .expect("alece binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = alece(args);
    assert!(
        out.status.success(),
        "alece {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path) -> String {
    let cfg = format!(
        "seed = 11\n\
         schema = {:?}\n\
         data_dir = {:?}\n\
         out_dir = {:?}\n\
         synth_users = 100\n\
         synth_posts = 300\n\
         synth_comments = 400\n\
         dml_budget = 400\n\
         train_queries = 15\n\
         eval_queries = 10\n\
         d_x = 6\n\
         n_enc = 1\n\
         n_ana = 1\n\
         heads = 2\n\
         max_epochs = 3\n\
         warmup_steps = 2\n",
        dir.join("schema.toml"),
        dir.join("data"),
        dir.join("out"),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg).unwrap();
    path.to_string_lossy().into_owned()
}

fn full_run(dir: &Path) {
    let cfg = write_config(dir);
    for cmd in ["gen-data", "gen-workload", "replay-train", "train"] {
        ok(&["--config", &cfg, cmd]);
    }
    ok(&["--config", &cfg, "evaluate", "--estimator", "alece,pg,optimal"]);
    ok(&["--config", &cfg, "estimate", "--estimator", "unisamp"]);
    ok(&["--config", &cfg, "report"]);
}

#[test]
fn help_documents_the_estimate_file_format() {
    let help = ok(&["--help"]);
    assert!(help.contains(ESTIMATE_FILE_FORMAT), "{help}");
    for flag in ["--seed", "--learning-rate", "--threads", "--config"] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn gradient_checks_pass() {
    let out = ok(&["gradcheck", "--seeds", "2"]);
    assert!(out.lines().count() >= 7, "{out}");
    assert!(!out.contains("FAIL"), "{out}");
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    // No seed anywhere.
    let out = alece(&["--out-dir", &dir.path().to_string_lossy(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    // Unknown key.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nbogus = 3\n").unwrap();
    assert_eq!(alece(&["--config", &bad.to_string_lossy(), "gen-data"]).status.code(), Some(2));
    // Non-positive value.
    assert_eq!(alece(&["--config", &cfg, "--batch-size", "0", "train"]).status.code(), Some(2));
    // Missing schema file.
    assert_eq!(alece(&["--config", &cfg, "gen-workload"]).status.code(), Some(2));
    assert_eq!(alece(&["--config", &cfg, "evaluate", "--estimator", "nope"]).status.code(), Some(2));
}

#[test]
fn malformed_data_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    ok(&["--config", &cfg, "gen-data"]);
    std::fs::write(dir.path().join("data").join("users.csv"), "id,reputation,year\n1,x,2010\n").unwrap();
    assert_eq!(alece(&["--config", &cfg, "gen-workload"]).status.code(), Some(3));
}

#[test]
fn pipeline_is_reproducible_and_optimal_is_exact() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    full_run(a.path());
    full_run(b.path());

    let report = std::fs::read_to_string(a.path().join("out/eval/optimal/report.csv")).unwrap();
    let mut rows = 0;
    for line in report.lines().skip(1) {
        let q: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(q, 1.0, "{line}");
        rows += 1;
    }
    assert!(rows > 0);

    let files = [
        "workload/workload.jsonl",
        "train/samples.txt",
        "train/states.pool",
        "model/alece.ckpt",
        "model/alece_history.csv",
        "eval/alece/report.csv",
        "eval/alece/quantiles.csv",
        "eval/alece/join_cards.txt",
        "eval/pg/single_cards.txt",
        "eval/pg/join_sub_queries.txt",
        "eval/quantiles.csv",
        "estimates/unisamp/single_cards.txt",
        "estimates/unisamp/join_cards.txt",
    ];
    for f in files {
        let x = std::fs::read(a.path().join("out").join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        let y = std::fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
    for rel in ["users", "posts", "comments"] {
        let f = format!("data/{rel}.csv");
        assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
    }
}
