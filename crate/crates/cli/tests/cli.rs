use std::path::Path;
use std::process::{Command, Output};

fn ecnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecnet"))
        .args(args)
        .current_dir(cwd)
        .env("ECNET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_prints_usage_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecnet(&["--help"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("Usage"));
    for sub in ["synth-data", "train-detector", "train", "sample", "eval", "plot"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn unknown_subcommand_and_flag_fail_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecnet(&["frobnicate"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));
    let o = ecnet(&["synth-data", "--out", "x", "--colour", "red"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn synth_data_writes_manifest_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecnet(&["synth-data", "--seed", "7", "--n", "16", "--out", "d/"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("d/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 16);
    let resolved = ecnet::config::RunConfig::load(&dir.path().join("d/config.toml")).unwrap();
    assert_eq!((resolved.data.seed, resolved.data.n), (7, 16));

    // Regenerating from the snapshot alone reproduces the dataset.
    let o = ecnet(&["synth-data", "--config", "d/config.toml", "--out", "e/"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["images.f32", "conds.f32", "captions.u8", "annos.json", "manifest.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("d").join(f)).unwrap(),
            std::fs::read(dir.path().join("e").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn empty_config_file_is_valid_and_unknown_keys_are_not() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.toml"), "").unwrap();
    let o = ecnet(&["synth-data", "--n", "2", "--config", "empty.toml", "--out", "d"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));

    std::fs::write(dir.path().join("bad.toml"), "[train]\nlearning_rat = 0.1\n").unwrap();
    let o = ecnet(&["synth-data", "--n", "2", "--config", "bad.toml", "--out", "d2"], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic should be one line: {err}");
    assert!(err.contains("learning_rat"));
    assert!(!dir.path().join("d2").exists());
}

#[test]
fn missing_inputs_give_one_line_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecnet(&["train-detector", "--data", "nowhere", "--out", "det"], dir.path());
    assert!(!o.status.success());
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);
    let o = ecnet(&["plot", "--metrics", "nowhere.csv", "--out", "p"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[train]\nlog_every = 1\nckpt_every = 2\n").unwrap();
    let steps: [&[&str]; 6] = [
        &["synth-data", "--seed", "3", "--n", "8", "--out", "d"],
        &["train-detector", "--data", "d", "--steps", "2", "--out", "det"],
        &["train", "--data", "d", "--detector", "det", "--mode", "sgi_only", "--steps", "2", "--config", "c.toml", "--out", "run"],
        &["sample", "--ckpt", "run", "--data", "d", "--index", "1", "--seed", "5", "--guidance", "0.1", "--out", "s"],
        &["eval", "--ckpt", "run/checkpoint.ecnt", "--data", "d", "--n", "2", "--out", "ev"],
        &["plot", "--metrics", "run/metrics.csv", "--out", "pl"],
    ];
    for args in steps {
        let o = ecnet(args, dir.path());
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let p = dir.path();
    assert!(p.join("run/config.toml").exists());
    assert_eq!(std::fs::read_to_string(p.join("run/metrics.csv")).unwrap().lines().count(), 3);
    assert_eq!(std::fs::read(p.join("s/sample.pgm")).unwrap().len(), 13 + 32 * 32);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["n_samples"], 2);
    let svg = std::fs::read_to_string(p.join("pl/l_total.svg")).unwrap();
    assert!(svg.contains("<polyline"));
    assert!(p.join("pl/metrics.csv").exists());
    let o = ecnet(&["train", "--data", "d", "--detector", "det", "--mode", "base", "--steps", "3", "--out", "run"], dir.path());
    assert!(!o.status.success(), "resuming with another mode must be refused");
}
