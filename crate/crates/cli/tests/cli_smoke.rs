//! End-to-end smoke runs of every command at toy scale, plus the exit
//! code and environment-variable contracts of the binary.

use lrd_cli::commands;
use lrd_cli::config::ExperimentConfig;
use lrd_core::targets::LeadLabel;
use std::path::Path;
use std::process::Command;

fn tiny_config(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.experiment.id = "smoke".into();
    c.experiment.seed = 9;
    c.experiment.out_dir = dir.join("out");
    c.teacher.k = 8;
    c.teacher.j = 1;
    c.teacher.dt = 0.01;
    c.generation.num_members = 6;
    c.generation.seed = 9;
    c.generation.duration_years = 1.4;
    c.generation.spinup_years = 0.2;
    c.training.steps = 30;
    c.training.batch_size = 8;
    c.training.width = 8;
    c.training.depth = 2;
    c.training.kernel = 3;
    c.training.val_every = 10;
    c.training.max_val_samples = 16;
    c.sampler.num_steps = 6;
    c.sampler.ensemble_size = 4;
    c.evaluation.num_dates = 10;
    c.evaluation.n_boot = 200;
    c.calibration.weights = vec![0.0, 1.0];
    c.calibration.eval_dates = 10;
    c.calibration.ensemble_size = 4;
    c.scaling.year_grid = vec![2.0, 4.0];
    c.scaling.steps = 20;
    c.scaling.eval_dates = 10;
    c.scaling.ensemble_size = 3;
    c.shifted.record_years = 10.0;
    c.shifted.members = 4;
    c.finetune.steps = 15;
    c.finetune.eval_dates = 12;
    c.finetune.reforecast_ensemble = 2;
    c.finetune.eval_ensemble = 3;
    c
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    std::env::remove_var("LRD_DATA_DIR");
    let config = tiny_config(dir.path());

    // generate
    let summary = commands::cmd_generate(&config).unwrap();
    assert_eq!(summary.members, 6);
    assert!(config.corpus_dir().join("manifest.json").exists());
    assert!(config.corpus_dir().join("clim_s2s.lrc").exists());
    assert!(config.corpus_dir().join("reference.lrd").exists());

    // train (medium + s2s)
    let t1 = commands::cmd_train(&config, LeadLabel::Medium).unwrap();
    assert!(t1.best_val_loss.is_finite());
    assert!(config.experiment.out_dir.join("model_medium.lrkp").exists());
    assert!(config.experiment.out_dir.join("curves_medium.csv").exists());
    let t2 = commands::cmd_train(&config, LeadLabel::S2s).unwrap();
    assert!(t2.best_val_loss.is_finite());

    // calibrate
    let cal = commands::cmd_calibrate(&config).unwrap();
    assert_eq!(cal.sweep.len(), 2);
    assert!(cal.climatological_spread > 0.0);
    assert!(config.experiment.out_dir.join("calibration.csv").exists());

    // perfect model
    let pm = commands::cmd_perfect_model(&config, LeadLabel::S2s).unwrap();
    assert_eq!(pm.teacher_perfect_rmse, 0.0, "perfect-IC teacher must be exact");
    assert!(pm.student.global_mean.is_finite());
    assert!(pm.det_climatology.global_mean > 0.0);
    assert_eq!(pm.student.per_case.len(), config.evaluation.num_dates);
    assert!(config
        .experiment
        .out_dir
        .join("report_perfect_s2s.json")
        .exists());
    assert!(config
        .experiment
        .out_dir
        .join("significance_student_vs_det_climatology_s2s.csv")
        .exists());

    // qr baseline
    let qr = commands::cmd_qr_baseline(&config).unwrap();
    let ln5 = 5.0f64.ln();
    assert!(
        (qr.initial_val_ce - ln5).abs() / ln5 < 0.02,
        "initial CE {} vs ln5 {}",
        qr.initial_val_ce,
        ln5
    );
    assert!(qr.uniform_rps > 0.0);

    // scaling (2 tiny sizes)
    let sc = commands::cmd_scaling(&config).unwrap();
    assert_eq!(sc.rows.len(), 2);
    let scaling_csv =
        std::fs::read_to_string(config.experiment.out_dir.join("scaling.csv")).unwrap();
    assert!(scaling_csv.starts_with("years,min_val_loss,s2s_crps,ci_lo,ci_hi"));

    // finetune-eval
    let ft = commands::cmd_finetune_eval(&config).unwrap();
    assert_eq!(ft.rows.len(), 4); // 2 systems x (raw, corrected)
    assert!(ft.rows.iter().any(|r| r.bias_corrected));
    assert!(ft.rows.iter().any(|r| !r.bias_corrected));

    // report
    commands::cmd_report(&config.experiment.out_dir).unwrap();
    assert!(config.experiment.out_dir.join("report.json").exists());
    assert!(config
        .experiment
        .out_dir
        .join("learning_curves.svg")
        .exists());
}

#[test]
fn train_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.experiment.id = "rerun".into();
    config.experiment.out_dir = dir.path().join("out_rerun");
    commands::cmd_generate(&config).unwrap();
    commands::cmd_train(&config, LeadLabel::Medium).unwrap();
    let read = |name: &str| std::fs::read(config.experiment.out_dir.join(name)).unwrap();
    let first = (
        read("model_medium.lrkp"),
        read("curves_medium.csv"),
        read("train_summary_medium.json"),
    );
    commands::cmd_train(&config, LeadLabel::Medium).unwrap();
    assert_eq!(first.0, read("model_medium.lrkp"));
    assert_eq!(first.1, read("curves_medium.csv"));
    assert_eq!(first.2, read("train_summary_medium.json"));
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_lrd");
    let dir = tempfile::tempdir().unwrap();

    // Missing corpus: train fails fast with exit code 3.
    let out = Command::new(bin)
        .args(["train", "--lead", "s2s", "--out"])
        .arg(dir.path().join("nothing"))
        .env("LRD_DATA_DIR", dir.path().join("no-data"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // Malformed config: exit code 2.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[teacher]\nk = 2\n").unwrap();
    let out = Command::new(bin)
        .args(["generate", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // Unknown lead label: exit code 2.
    let out = Command::new(bin)
        .args(["train", "--lead", "weekly"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_dir_env_overrides_corpus_root() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.experiment.id = "envtest".into();
    std::env::set_var("LRD_DATA_DIR", dir.path().join("data-root"));
    let corpus = config.corpus_dir();
    std::env::remove_var("LRD_DATA_DIR");
    assert!(corpus.starts_with(dir.path().join("data-root")));
    assert!(corpus.ends_with("envtest/corpus"));
}
