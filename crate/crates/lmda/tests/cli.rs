//! End-to-end tests of the `lmda` binary via its public flag grammar.

use std::path::Path;
use std::process::{Command, Output};

fn lmda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmda"))
        .current_dir(dir)
        .env_remove("LMDA_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_writes_a_loadable_container() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmda(
        dir.path(),
        &[
            "synth", "--kind", "erd", "--n-per-class", "10", "--channels", "8", "--samples", "200",
            "--fs", "250", "--seed", "0", "--out", "d.eegb",
        ],
    );
    assert_ok(&out);
    let set = lmda::dataio::load(dir.path().join("d.eegb")).unwrap();
    assert_eq!(set.n_trials(), 20);
    assert_eq!(set.n_channels(), 8);
    assert_eq!(set.fs_hz, 250.0);
}

#[test]
fn train_eval_explain_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for (name, n, seed) in [("tr.eegb", "30", "0"), ("te.eegb", "15", "1")] {
        let out = lmda(
            dir.path(),
            &[
                "synth", "--kind", "erd", "--n-per-class", n, "--channels", "8", "--samples",
                "200", "--fs", "250", "--seed", seed, "--out", name,
            ],
        );
        assert_ok(&out);
    }
    let out = lmda(
        dir.path(),
        &[
            "train", "--data", "tr.eegb", "--test", "te.eegb", "--epochs", "3", "--batch", "16",
            "--seed", "0", "--no-depth-attn", "--out", "m.lmdm", "--log", "r.csv",
        ],
    );
    assert_ok(&out);

    // the log has a header plus one row per epoch
    let log = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("epoch,train_loss,test_acc,test_kappa,test_auc\n"));

    // the checkpoint loads back with the ablation recorded
    let model = lmda::model::load_model(dir.path().join("m.lmdm")).unwrap();
    assert!(!model.config.use_depth_attn);
    assert!(model.config.use_channel_attn);

    // eval reprints the final-epoch metrics of the training log
    let last = log.lines().last().unwrap();
    let cols: Vec<&str> = last.split(',').collect();
    let out = lmda(dir.path(), &["eval", "--model", "m.lmdm", "--data", "te.eegb"]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let metrics = stdout.lines().last().unwrap();
    assert_eq!(metrics, format!("acc={} kappa={} auc={}", cols[2], cols[3], cols[4]));

    // info prints the checkpoint config
    let out = lmda(dir.path(), &["info", "--path", "m.lmdm"]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"use_depth_attn\": false"));
    let out = lmda(dir.path(), &["info", "--path", "te.eegb"]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"fs_hz\""));
}

#[test]
fn missing_input_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmda(
        dir.path(),
        &["train", "--data", "missing.eegb", "--test", "also.eegb", "--out", "m.lmdm"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.eegb"));
}

#[test]
fn unknown_flags_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmda(dir.path(), &["synth", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn repeated_invocations_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let synth = |name: &str| {
        let out = lmda(
            dir.path(),
            &[
                "synth", "--kind", "erp", "--n-per-class", "12", "--channels", "8", "--samples",
                "150", "--fs", "200", "--seed", "5", "--out", name,
            ],
        );
        assert_ok(&out);
        std::fs::read(dir.path().join(name)).unwrap()
    };
    assert_eq!(synth("a.eegb"), synth("b.eegb"));

    let out = lmda(
        dir.path(),
        &[
            "synth", "--kind", "erp", "--n-per-class", "8", "--channels", "8", "--samples", "150",
            "--fs", "200", "--seed", "9", "--out", "te.eegb",
        ],
    );
    assert_ok(&out);
    let train = |model: &str, log: &str| {
        let out = lmda(
            dir.path(),
            &[
                "train", "--data", "a.eegb", "--test", "te.eegb", "--epochs", "2", "--batch",
                "16", "--seed", "3", "--out", model, "--log", log,
            ],
        );
        assert_ok(&out);
        (std::fs::read(dir.path().join(model)).unwrap(), std::fs::read(dir.path().join(log)).unwrap())
    };
    assert_eq!(train("m1.lmdm", "r1.csv"), train("m2.lmdm", "r2.csv"));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let with_env = Command::new(env!("CARGO_BIN_EXE_lmda"))
        .current_dir(dir.path())
        .env("LMDA_SEED", "42")
        .args([
            "synth", "--kind", "erd", "--n-per-class", "5", "--channels", "8", "--samples", "100",
            "--fs", "250", "--out", "env.eegb",
        ])
        .output()
        .unwrap();
    assert!(with_env.status.success());
    let explicit = lmda(
        dir.path(),
        &[
            "synth", "--kind", "erd", "--n-per-class", "5", "--channels", "8", "--samples", "100",
            "--fs", "250", "--seed", "42", "--out", "flag.eegb",
        ],
    );
    assert_ok(&explicit);
    assert_eq!(
        std::fs::read(dir.path().join("env.eegb")).unwrap(),
        std::fs::read(dir.path().join("flag.eegb")).unwrap()
    );
}

#[test]
fn preprocess_transforms_and_saves() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmda(
        dir.path(),
        &[
            "synth", "--kind", "erd", "--n-per-class", "6", "--channels", "8", "--samples", "500",
            "--fs", "250", "--seed", "2", "--out", "raw.eegb",
        ],
    );
    assert_ok(&out);
    let out = lmda(
        dir.path(),
        &[
            "preprocess", "--data", "raw.eegb", "--band", "4:38", "--order", "100", "--resample",
            "125", "--normalize", "--out", "prep.eegb",
        ],
    );
    assert_ok(&out);
    let prep = lmda::dataio::load(dir.path().join("prep.eegb")).unwrap();
    assert_eq!(prep.fs_hz, 125.0);
    assert_eq!(prep.n_samples(), 250);
    assert_eq!(prep.n_trials(), 12);

    // a nonsense band is a usage error
    let out = lmda(
        dir.path(),
        &["preprocess", "--data", "raw.eegb", "--band", "38:4", "--out", "x.eegb"],
    );
    assert_eq!(out.status.code(), Some(1));
}
