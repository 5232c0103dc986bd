use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn audit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_audit")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn planted(dir: &Path) -> std::path::PathBuf {
    let corpus = dir.join("corpus");
    let out = audit(&[
        "generate", "--kind", "planted", "--out", s(&corpus), "--train-size", "40", "--test-size", "10", "--length", "5",
        "--vocab-size", "15", "--seed", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    corpus
}

const SMALL: [&str; 12] = [
    "--epochs", "1", "--embedding-dim", "6", "--hidden-dim", "4", "--iterations", "20", "--perms", "10", "--k", "2",
];

#[test]
fn report_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = planted(dir.path());
    let out = dir.path().join("run");
    let mut args = vec!["report", "--corpus", s(&corpus), "--out", s(&out), "--heatmaps", "3"];
    args.extend(SMALL);
    let res = audit(&args);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    for rel in [
        "report.json",
        "records/importance.jsonl",
        "records/counterfactual.jsonl",
        "plots/tau_g_histogram.csv",
        "plots/eps_max_jsd_histogram.csv",
        "plots/max_alpha_vs_delta_y_med.csv",
        "plots/max_alpha_vs_eps_max_jsd.csv",
        "model.json",
        "history.csv",
    ] {
        assert!(out.join(rel).is_file(), "missing {rel}");
    }
    assert_eq!(fs::read_dir(out.join("heatmaps")).unwrap().count(), 3);
    audit_core::report::verify_outputs(&out).unwrap();
}

#[test]
fn permute_only_has_no_importance() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = planted(dir.path());
    let out = dir.path().join("run");
    let mut args = vec!["permute", "--corpus", s(&corpus), "--out", s(&out)];
    args.extend(SMALL);
    assert!(audit(&args).status.success());
    let report = fs::read_to_string(out.join("report.json")).unwrap();
    assert!(!report.contains("\"importance\""));
    assert!(!out.join("records/importance.jsonl").exists());
}

#[test]
fn config_file_is_read_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = planted(dir.path());
    let out = dir.path().join("run");
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "corpus = {:?}\nout = {:?}\nseed = 9\nperms = 7\nembedding_dim = 6\nhidden_dim = 4\n\n[train]\nepochs = 1\n",
            s(&corpus),
            s(&out)
        ),
    )
    .unwrap();
    let res = audit(&["permute", "--config", s(&cfg), "--perms", "5"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["metadata"]["seed"], 9);
    assert_eq!(report["metadata"]["perms"], 5);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(audit(&["report", "--corpus", s(&dir.path().join("missing"))]).status.code(), Some(2));
    assert_eq!(audit(&["report"]).status.code(), Some(2));
    assert_eq!(audit(&["report", "--corpus", "x", "--similarity", "cosine"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(audit(&["report", "--config", s(&cfg)]).status.code(), Some(2));
    let corpus = planted(dir.path());
    assert_eq!(audit(&["report", "--corpus", s(&corpus), "--eps", "-1"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("bad.jsonl");
    fs::write(&corpus, "{\"id\":\"a\",\"tokens\":[\"x\"],\"label\":0}\n{oops\n").unwrap();
    let out = dir.path().join("run");
    let res = audit(&["report", "--corpus", s(&corpus), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("load stage failed"));
    assert!(out.join("PARTIAL").exists());
}

#[test]
fn train_then_analyse_checkpoint_then_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = planted(dir.path());
    let trained = dir.path().join("trained");
    let mut args = vec!["train", "--corpus", s(&corpus), "--out", s(&trained)];
    args.extend(SMALL);
    assert!(audit(&args).status.success());
    let model = trained.join("model.json");
    assert!(model.is_file() && trained.join("history.csv").is_file());

    let run = dir.path().join("adv");
    let mut args = vec!["adversarial", "--corpus", s(&corpus), "--checkpoint", s(&model), "--out", s(&run)];
    args.extend(SMALL);
    assert!(audit(&args).status.success());
    let report = fs::read_to_string(run.join("report.json")).unwrap();
    assert!(report.contains("\"trained\": false"));

    let pages = dir.path().join("pages");
    let res = audit(&[
        "heatmap",
        "--corpus",
        s(&corpus),
        "--checkpoint",
        s(&model),
        "--records",
        s(&run.join("records/counterfactual.jsonl")),
        "--id",
        "test-000001",
        "--out",
        s(&pages),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let page = fs::read_to_string(pages.join("test-000001.html")).unwrap();
    assert!(page.contains("data-saturation"));
}

#[test]
fn generate_babi_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("babi");
    let res = audit(&["generate", "--kind", "babi", "--out", s(&out), "--train-size", "20", "--test-size", "5"]);
    assert!(res.status.success());
    let meta = fs::read_to_string(out.join("corpus.json")).unwrap();
    assert!(meta.contains("\"qa\""));
    assert_eq!(fs::read_to_string(out.join("test.jsonl")).unwrap().lines().count(), 5);
}
