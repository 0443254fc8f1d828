use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn emutune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emutune"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// A smoke configuration whose run directory lives under `dir`.
fn smoke_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("cfg.json");
    let run = dir.join("run");
    let out = emutune(&[
        "init-config",
        "--preset",
        "smoke",
        "--output-dir",
        run.to_str().unwrap(),
        "--out",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    cfg
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&emutune(&[])), 1);
    assert_eq!(code(&emutune(&["no-such-command"])), 1);
    assert_eq!(code(&emutune(&["gen-data"])), 1, "missing --config");
    assert_eq!(code(&emutune(&["--help"])), 0);
}

#[test]
fn invalid_configuration_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let text = String::from_utf8(read(&cfg)).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["dates"]["test"] = value["dates"]["train"].clone();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, serde_json::to_string(&value).unwrap()).unwrap();
    let out = emutune(&["--config", bad.to_str().unwrap(), "gen-data"]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("run").join("data").exists(), "nothing generated");

    let missing = dir.path().join("missing.json");
    assert_eq!(code(&emutune(&["--config", missing.to_str().unwrap(), "gen-data"])), 2);
}

#[test]
fn gen_data_is_reproducible_and_guards_its_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&emutune(&["--config", cfg, "gen-data"])), 0);
    let manifest: serde_json::Value = serde_json::from_slice(&read(run.join("data/manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);

    let other = dir.path().join("other");
    let out = emutune(&["--config", cfg, "--output-dir", other.to_str().unwrap(), "gen-data"]);
    assert_eq!(code(&out), 0);
    for f in ["data/system_a.arc", "data/system_b.arc", "data/manifest.json"] {
        assert_eq!(read(run.join(f)), read(other.join(f)), "{f}");
    }

    // A different seed is a different experiment.
    assert_eq!(code(&emutune(&["--config", cfg, "--seed", "8", "gen-data"])), 2);
}

#[test]
fn pipeline_and_single_step_commands_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let run = dir.path().join("run");

    let out = emutune(&["--config", cfg, "pipeline", "--stop-after", "sensitivity"]);
    assert_eq!(code(&out), 0);
    assert!(!run.join("summary.json").exists());
    let out = emutune(&["--config", cfg, "pipeline"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("12step"));

    // Single stages reproduce the pipeline's checkpoints.
    let out = emutune(&["--config", cfg, "train-stage", "--stage", "1b", "--checkpoint", "1a"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(run.join("cli/train-stage/1b.ckpt")), read(run.join("checkpoints/1b.ckpt")));
    assert_eq!(code(&emutune(&["--config", cfg, "sensitivity-weights"])), 0);
    assert_eq!(
        read(run.join("cli/sensitivity-weights/weights.csv")),
        read(run.join("sensitivity/weights.csv"))
    );
    assert_eq!(code(&emutune(&["--config", cfg, "lr-search", "--stage", "1b", "--checkpoint", "1a"])), 0);
    assert_eq!(read(run.join("cli/lr-search/lr_search_1b.csv")), read(run.join("eval/lr_search_1b.csv")));

    // Verification commands; reruns are byte-identical.
    let commands: [&[&str]; 5] = [
        &["split-horizon-diag", "--checkpoint", "12step", "--windows", "4"],
        &["evaluate", "--checkpoint", "pretrained", "--checkpoint", "final=12step"],
        &["spectra", "--checkpoint", "12step"],
        &["scorecard", "--candidate", "12step", "--reference", "pretrained"],
        &["compare-norms"],
    ];
    for args in commands {
        let mut full = vec!["--config", cfg];
        full.extend_from_slice(args);
        assert_eq!(code(&emutune(&full)), 0, "{args:?}");
    }
    let files = [
        "cli/evaluate/rmse_acc.csv",
        "cli/spectra/spectra_12step.csv",
        "cli/scorecard/scorecard.csv",
        "cli/compare-norms/comparison.csv",
        "cli/scorecard/manifest.json",
    ];
    let first: Vec<Vec<u8>> = files.iter().map(|f| read(run.join(f))).collect();
    let evaluate = String::from_utf8(first[0].clone()).unwrap();
    assert!(evaluate.contains("final@system_b") && evaluate.contains("pretrained@system_b"));
    assert_eq!(
        code(&emutune(&["--config", cfg, "scorecard", "--candidate", "12step", "--reference", "pretrained"])),
        0
    );
    assert_eq!(read(run.join(files[2])), first[2]);
    let manifest: serde_json::Value = serde_json::from_slice(&first[4]).unwrap();
    assert_eq!(manifest["command"], "scorecard");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    let sweep = String::from_utf8(read(run.join("cli/split-horizon-diag/summary.csv"))).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 1 + 11 + 1, "unsplit, two-segment splits, single steps");
    assert!(sweep.lines().nth(1).unwrap().starts_with("12,1.000000000e0,"));

    let out = emutune(&["--config", cfg, "train-stage", "--stage", "nope", "--checkpoint", "1a"]);
    assert_eq!(code(&out), 2);
    let out = emutune(&["--config", cfg, "scorecard", "--candidate", "missing"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn diagnostics_run_on_a_fresh_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&emutune(&["--config", cfg, "grad-check", "--steps", "2", "--probes", "3"])), 0);
    let report: serde_json::Value = serde_json::from_slice(&read(run.join("cli/grad-check/grad_check.json"))).unwrap();
    for e in report["entries"].as_array().unwrap() {
        assert!(e["max_rel_error"].as_f64().unwrap() < 1e-5, "{e}");
    }

    assert_eq!(code(&emutune(&["--config", cfg, "pipeline", "--stop-after", "pretrained"])), 0);
    let out = emutune(&[
        "--config",
        cfg,
        "split-horizon-diag",
        "--checkpoint",
        "pretrained",
        "--stage",
        "2step",
        "--windows",
        "4",
        "--split",
        "2",
        "--split",
        "1+1",
    ]);
    // The 2-step stage is sensitivity-weighted and those weights do not exist yet.
    assert_eq!(code(&out), 2);
    let out = emutune(&[
        "--config",
        cfg,
        "split-horizon-diag",
        "--checkpoint",
        "pretrained",
        "--stage",
        "1a",
        "--windows",
        "4",
        "--split",
        "3",
    ]);
    assert_eq!(code(&out), 2, "split longer than the horizon");
}
