use std::path::Path;
use std::process::{Command, Output};

fn fgfarl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgfarl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let ok = fgfarl(
        d,
        &["run", "--set", "synth.preset=standard", "--set", "synth.n_episodes=400", "--seed", "5"],
    );
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(d.join("out/run/summary.json").exists());

    let bad_alpha = fgfarl(d, &["run", "--set", "synth.preset=standard", "--alpha", "2"]);
    assert_eq!(bad_alpha.status.code(), Some(1));
    let unknown_key = fgfarl(d, &["run", "--set", "synth.preset=standard", "--set", "nope=1"]);
    assert_eq!(unknown_key.status.code(), Some(1));
    let no_source = fgfarl(d, &["run"]);
    assert_eq!(no_source.status.code(), Some(1));
    let bad_usage = fgfarl(d, &["frobnicate"]);
    assert_eq!(bad_usage.status.code(), Some(1));
    let missing_data = fgfarl(d, &["run", "--set", "data.path=absent.jsonl"]);
    assert_eq!(missing_data.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing_data.stderr).contains("stage data"));
    let help = fgfarl(d, &["--help"]);
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn config_file_synth_then_run_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("exp.cfg"),
        "# five groups\nsynth.preset = five-group\nseed = 9\nope.bootstrap_replicates = 200\nrun_label = five\n",
    )
    .unwrap();
    let synth = fgfarl(d, &["synth", "--config", "exp.cfg", "--out", "data/five.jsonl"]);
    assert_eq!(synth.status.code(), Some(0), "{}", String::from_utf8_lossy(&synth.stderr));
    assert!(d.join("data/five.truth.json").exists());

    let run = fgfarl(
        d,
        &[
            "run",
            "--set",
            "data.path=data/five.jsonl",
            "--set",
            "ope.bootstrap_replicates=200",
            "--mode",
            "coverage",
            "--min-group-n",
            "100",
            "--reward-norm",
            "--run-label",
            "file",
        ],
    );
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let resolved = std::fs::read_to_string(d.join("out/file/config.resolved")).unwrap();
    assert!(resolved.contains("calibrate.mode = coverage"));
    assert!(resolved.contains("calibrate.attribute = race"));
    assert!(resolved.contains("reward_norm = true"));

    let report = fgfarl(d, &["report", "--dir", "out/file"]);
    assert_eq!(report.status.code(), Some(0));
    let missing = fgfarl(d, &["report", "--dir", "out/none"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn sweep_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = fgfarl(
        d,
        &[
            "sweep",
            "--set",
            "synth.preset=standard",
            "--set",
            "synth.n_episodes=500",
            "--set",
            "ope.bootstrap_replicates=100",
            "--alphas",
            "0.05,0.2",
            "--epsilons",
            "0.02",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("out/run/sensitivity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
