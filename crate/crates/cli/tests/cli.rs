use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
corpus.num_speakers = 4
corpus.utts_per_speaker = 10
corpus.frames_per_utt = 40
corpus.feature_dim = 6
encoder.hidden = 8
encoder.embedding_dim = 6
stage1.epochs = 2
stage2.epochs_plain = 1
stage2.epochs_gated = 1
stage2.tau_schedule = 2,inf
metrics.num_trials = 200
toy.num_speakers = 3
toy.utts_per_speaker = 10
toy.epochs = 7
";

fn lgl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgl")).args(args).output().unwrap()
}

fn with_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("cfg.txt");
    std::fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p.to_string_lossy().into_owned()
}

fn run_ok(args: &[&str]) -> String {
    let out = lgl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let cfg = with_config(d.path(), "");
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for o in [&a, &b] {
        run_ok(&["gen-data", "--config", &cfg, "--seed", "3", "--out", o.to_str().unwrap()]);
    }
    for f in ["corpus.bin", "trials.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = d.path().join("c");
    run_ok(&["gen-data", "--config", &cfg, "--seed", "4", "--out", c.to_str().unwrap()]);
    assert_ne!(std::fs::read(a.join("corpus.bin")).unwrap(), std::fs::read(c.join("corpus.bin")).unwrap());
}

#[test]
fn config_errors_exit_2_without_partial_files() {
    let d = tempfile::tempdir().unwrap();
    let bad = with_config(d.path(), "corpus.feature_dim = 0\n");
    let out_dir = d.path().join("out");
    let out = lgl(&["gen-data", "--config", &bad, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());

    let unknown = with_config(d.path(), "stage9.speed = 1\n");
    assert_eq!(lgl(&["gen-data", "--config", &unknown]).status.code(), Some(2));
    assert_eq!(lgl(&["pipeline", "--tau-schedule", "1,x"]).status.code(), Some(2));
    assert_eq!(lgl(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(lgl(&["ablate", "--axis", "depth"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = with_config(d.path(), "");
    let out = lgl(&["eval", "--config", &cfg, "--out", d.path().to_str().unwrap(), "--encoder", "/nonexistent/enc"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn staged_commands_share_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let cfg = with_config(d.path(), "");
    let out = d.path().join("run");
    let o = out.to_str().unwrap();
    run_ok(&["gen-data", "--config", &cfg, "--out", o]);
    let corpus = out.join("corpus.bin");
    let trials = out.join("trials.txt");
    let data = ["--corpus", corpus.to_str().unwrap(), "--trials", trials.to_str().unwrap()];
    let with = |cmd: &str| -> Vec<String> {
        let mut v: Vec<String> = [cmd, "--config", &cfg, "--out", o].iter().map(|s| s.to_string()).collect();
        v.extend(data.iter().map(|s| s.to_string()));
        v
    };
    let call = |cmd: &str| run_ok(&with(cmd).iter().map(String::as_str).collect::<Vec<_>>());

    assert!(call("stage1").contains("EER"));
    assert!(out.join("stage1.enc").exists());
    call("cluster");
    assert!(std::fs::read_to_string(out.join("elbow.csv")).unwrap().starts_with("k,wcss\n"));
    assert_eq!(std::fs::read_to_string(out.join("labels.txt")).unwrap().lines().count(), 40);
    let summary = call("stage2");
    assert!(summary.contains("final EER"));
    let reports: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("reports.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    let losses = std::fs::read_to_string(out.join("iter0_losses.csv")).unwrap();
    assert!(losses.starts_with("utt_id,epoch,loss,selected\n"));
    assert_eq!(losses.lines().count(), 1 + 2 * 40);
    let eval = call("eval");
    assert!(eval.contains("EER"));
    assert_eq!(std::fs::read_to_string(out.join("scores.txt")).unwrap().lines().count(), 200);
}

#[test]
fn no_lgl_removes_selection() {
    let d = tempfile::tempdir().unwrap();
    let cfg = with_config(d.path(), "");
    let o = d.path().join("n");
    run_ok(&["pipeline", "--config", &cfg, "--out", o.to_str().unwrap(), "--no-lgl"]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(o.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["lgl"], false);
    let reports: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(o.join("reports.json")).unwrap()).unwrap();
    assert!(reports.as_array().unwrap().iter().all(|r| r["selection_fraction"].is_null()));
}

#[test]
fn toy_and_ablation_tables() {
    let d = tempfile::tempdir().unwrap();
    let cfg = with_config(d.path(), "");
    let o = d.path().join("t");
    let os = o.to_str().unwrap();
    run_ok(&["toy", "--config", &cfg, "--out", os]);
    let toy = std::fs::read_to_string(o.join("toy.csv")).unwrap();
    assert!(toy.starts_with("epoch,mean_reliable,mean_unreliable\n"));
    assert_eq!(toy.lines().count(), 8);

    let table = run_ok(&["ablate", "--axis", "tau", "--config", &cfg, "--out", os]);
    let taus: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(taus, ["1", "2", "3", "4", "5", "inf"]);
    let table = run_ok(&["ablate", "--axis", "k", "--config", &cfg, "--out", os]);
    let ks: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(ks, ["2", "3", "4", "5", "6"]);
    assert!(o.join("ablation_k.csv").exists());
}
