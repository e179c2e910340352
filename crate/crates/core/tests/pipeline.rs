use std::path::Path;

use fgfarl::calibrate::ThresholdMode;
use fgfarl::cli::commands::{cmd_report, cmd_run, cmd_sweep, cmd_synth, sweep_label};
use fgfarl::cli::config::{parse_config_text, DataSource, FairWeighting, RunConfig};
use fgfarl::data;
use fgfarl::report::{self, RunArtifacts};
use fgfarl::synthdata::{self, GeneratorConfig, GroundTruth};
use fgfarl::Error;

fn config(n: usize, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::with_data(DataSource::Generator(Box::new(GeneratorConfig::standard(n, 3))));
    cfg.out_dir = out.to_path_buf();
    cfg.bootstrap.replicates = 200;
    cfg
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cmd_run(&config(800, tmp.path())).unwrap();
    for name in ["fg_farl", "haco", "bc", "fair_bc", "mu"] {
        assert!(out.dir.join(format!("policy_{name}.json")).exists(), "{name}");
        assert!(out.dir.join(format!("top_coefficients_{name}.csv")).exists(), "{name}");
    }
    for f in [
        "config.resolved",
        "risk_model.json",
        report::THRESHOLDS_FILE,
        report::HACO_THRESHOLDS_FILE,
        report::ESTIMATES_FILE,
        report::SUMMARY_FILE,
        report::TIMINGS_FILE,
    ] {
        assert!(out.dir.join(f).exists(), "{f}");
    }
    // HACO uses one threshold everywhere.
    let haco = &out.artifacts.haco_thresholds;
    assert!(haco.groups.values().all(|g| g.tau == haco.global_tau));
    assert!(out.artifacts.subgroups.contains_key(report::LOGGED_POLICY));
    let loaded = RunArtifacts::load(&out.dir).unwrap();
    assert_eq!(loaded, out.artifacts);
    // Stage timings cover the main stages.
    for stage in ["risk", "calibrate", "policy", "fqe", "dr", "report"] {
        assert!(out.summary.stage_timings.contains_key(stage), "{stage}");
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(600, tmp.path());
    cfg.run_label = "first".into();
    let first = cmd_run(&cfg).unwrap();
    let text = std::fs::read_to_string(first.dir.join("config.resolved")).unwrap();
    let mut again = RunConfig::from_raw(&parse_config_text(&text).unwrap()).unwrap();
    again.run_label = "second".into();
    let second = cmd_run(&again).unwrap();
    assert_eq!(first.artifacts.policies, second.artifacts.policies);
    assert_eq!(first.artifacts.thresholds, second.artifacts.thresholds);
}

#[test]
fn report_rebuilds_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(600, tmp.path());
    cfg.write_timings = false;
    let out = cmd_run(&cfg).unwrap();
    let before = std::fs::read(out.dir.join(report::SUMMARY_FILE)).unwrap();
    std::fs::remove_file(out.dir.join(report::PLOT_JSON)).unwrap();
    let summary = cmd_report(&out.dir).unwrap();
    assert_eq!(summary.alpha, cfg.calibration.alpha);
    assert_eq!(std::fs::read(out.dir.join(report::SUMMARY_FILE)).unwrap(), before);
    assert!(out.dir.join(report::PLOT_JSON).exists());
    assert!(matches!(cmd_report(&tmp.path().join("nowhere")), Err(Error::MissingArtifact(_))));
}

#[test]
fn variants_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(700, tmp.path());
    cfg.reward_norm = true;
    cfg.policy_include_calib = true;
    cfg.fair_bc_weighting = FairWeighting::GroupBalanced;
    cfg.mode = ThresholdMode::Coverage;
    cfg.run_label = "variant".into();
    let out = cmd_run(&cfg).unwrap();
    // Normalized rewards lie in [−1, 0], so logged ten-step returns lie in [−10, 0].
    for s in &out.artifacts.subgroups[report::LOGGED_POLICY] {
        assert!(s.mean <= 0.0 && s.mean >= -10.0, "{}", s.mean);
    }
    assert_eq!(out.summary.mode, ThresholdMode::Coverage);
}

#[test]
fn unknown_attribute_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(300, tmp.path());
    cfg.attribute = Some("nope".into());
    assert!(matches!(cmd_run(&cfg), Err(Error::Config(_))));
}

#[test]
fn stage_failures_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut gen = GeneratorConfig::standard(300, 4);
    // No harm at all: the risk model cannot be fitted.
    gen.true_risk_weights = vec![0.0, 0.0, 0.0, 0.0, -50.0];
    gen.action_harm_effect = vec![0.0; 9];
    let mut cfg = config(300, tmp.path());
    cfg.data = DataSource::Generator(Box::new(gen));
    match cmd_run(&cfg) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "risk"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn sweep_records_failures_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(500, tmp.path());
    let out = cmd_sweep(&cfg, &[0.1, 1.5], &[0.02]).unwrap();
    assert_eq!(out.runs.len(), 1);
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].alpha, 1.5);
    assert_eq!(out.rows.len(), 1);
    assert!(out.dir.join(sweep_label(0.1, 0.02)).join(report::SUMMARY_FILE).exists());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.dir.join("sensitivity.json")).unwrap()).unwrap();
    assert_eq!(json["failures"].as_array().unwrap().len(), 1);
}

#[test]
fn synth_writes_loadable_data_and_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("sub").join("data.jsonl");
    let cfg = config(250, tmp.path());
    let sidecar = cmd_synth(&cfg, &path).unwrap();
    assert_eq!(sidecar, tmp.path().join("sub").join("data.truth.json"));
    let loaded = data::load_dataset(&path).unwrap();
    let DataSource::Generator(gen) = &cfg.data else { unreachable!() };
    assert_eq!(loaded, synthdata::generate(gen).unwrap());
    let truth: GroundTruth = serde_json::from_str(&std::fs::read_to_string(&sidecar).unwrap()).unwrap();
    assert_eq!(truth.true_risk_weights, gen.true_risk_weights);
    // Action effects make the threshold oracle unavailable for this preset.
    assert!(truth.analytic_thresholds.is_none());

    let mut file_cfg = config(0, tmp.path());
    file_cfg.data = DataSource::File(path);
    assert!(matches!(cmd_synth(&file_cfg, &tmp.path().join("x.jsonl")), Err(Error::Config(_))));
    file_cfg.run_label = "from_file".into();
    file_cfg.bootstrap.replicates = 100;
    assert!(cmd_run(&file_cfg).is_ok());
}

#[test]
fn sidecar_thresholds_match_large_sample() {
    let mut gen = GeneratorConfig::standard(40_000, 8);
    gen.horizon = 1;
    gen.true_risk_weights = vec![0.0, 0.0, 1.0, -0.7, -1.5];
    gen.action_harm_effect = vec![0.0; 9];
    let truth = synthdata::ground_truth(&gen, 0.1, 0.02).analytic_thresholds.unwrap();
    let data = synthdata::generate(&gen).unwrap();
    let model = gen.true_risk_model().unwrap();
    let mut scores = model.scores(&data);
    scores.sort_by(f64::total_cmp);
    let empirical = scores[(0.9 * scores.len() as f64).ceil() as usize - 1];
    assert!((empirical - truth.global_tau).abs() < 0.01, "{empirical} vs {}", truth.global_tau);
    let harm = data.steps().filter(|s| s.is_harm()).count() as f64 / data.n_steps() as f64;
    let analytic = gen.analytic_harm_rate().unwrap();
    assert!((harm - analytic).abs() < 4.0 * (analytic * (1.0 - analytic) / data.n_steps() as f64).sqrt());
}
