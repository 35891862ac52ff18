//! The experiment commands behind the CLI subcommands. Each command is
//! a pure function of (config, corpus bytes, seed): reruns produce byte
//! identical outputs. Commands fail fast with a missing-input error
//! instead of recomputing artifacts owned by other commands.

use crate::config::ExperimentConfig;
use crate::protocol::{
    build_cases, build_eval_world, climatology_baselines, compare_systems, daily_climatology_of,
    eval_days, normalize_trajectory, resolve_perturbation, score_system, shift_trajectory,
    EvalWorld,
};
use crate::svg;
use lrd_core::datagen::{
    run_nature, Dataset, GenerationConfig, Trajectory, DAYS_PER_YEAR,
};
use lrd_core::dynsys::SystemParams;
use lrd_core::error::{Error, Result};
use lrd_core::qrbaseline::{self, QuintileEdges};
use lrd_core::rng;
use lrd_core::sampler::{forecast_cases, guidance_sweep, EnsembleForecast, SweepPoint};
use lrd_core::student::{
    finetune, load_checkpoint, run_training, save_checkpoint, train, Arch, NetParams, SamplePool,
    TrainConfig, TrainResult,
};
use lrd_core::targets::{LeadClimatology, LeadLabel, LeadSpec};
use lrd_core::verify::{self, ReforecastRecord};
use serde::Serialize;
use std::path::{Path, PathBuf};

const SEED_TRAIN: u64 = 0x71;
const SEED_EVAL: u64 = 0x72;
const SEED_SCALING: u64 = 0x73;
const SEED_SHIFTED: u64 = 0x74;
const SEED_QR: u64 = 0x75;

fn out_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = config.experiment.out_dir.clone();
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn open_corpus(config: &ExperimentConfig) -> Result<Dataset> {
    Dataset::open(&config.corpus_dir())
}

fn load_model(config: &ExperimentConfig, name: &str) -> Result<NetParams> {
    let path = config.experiment.out_dir.join(name);
    Ok(load_checkpoint(&path)?.params)
}

fn student_arch(config: &ExperimentConfig) -> Arch {
    Arch::student(
        config.teacher.k,
        config.training.width,
        config.training.depth,
        config.training.kernel,
    )
}

fn build_pools(
    config: &ExperimentConfig,
    dataset: &Dataset,
    spec: LeadSpec,
) -> Result<(SamplePool, SamplePool)> {
    let day_len = EvalWorld::day_len(&config.teacher);
    let normalizer = dataset.manifest.normalizer;
    let load = |ids: &[usize]| -> Result<Vec<Trajectory>> {
        let mut trajs = dataset.load_split(ids)?;
        for t in trajs.iter_mut() {
            normalize_trajectory(t, &normalizer);
        }
        Ok(trajs)
    };
    let save_window = dataset.manifest.config.save_window;
    let train_pool = SamplePool::new(
        load(&dataset.manifest.train_members)?,
        spec,
        save_window,
        day_len,
    )?;
    let val_pool = SamplePool::new(
        load(&dataset.manifest.val_members)?,
        spec,
        save_window,
        day_len,
    )?;
    Ok((train_pool, val_pool))
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct GenerateSummary {
    pub provenance: crate::config::Provenance,
    pub members: usize,
    pub stable_members: usize,
    pub pruned_members: Vec<usize>,
    pub train_members: usize,
    pub val_members: usize,
    pub frames_per_member: usize,
    pub normalizer_mean: f64,
    pub normalizer_std: f64,
}

/// Generate the training corpus, the reference member and the
/// climatology files for all three leads.
pub fn cmd_generate(config: &ExperimentConfig) -> Result<GenerateSummary> {
    let corpus_dir = config.corpus_dir();
    let dataset = Dataset::generate(&corpus_dir, &config.generation, &config.teacher)?;

    // Reference member for climatologies, long enough for the seasonal
    // target margin.
    let seasonal_margin = LeadSpec::seasonal().frames_needed(config.generation.save_window);
    let reference_days = config.evaluation.reference_years * DAYS_PER_YEAR + seasonal_margin + 8;
    let ref_config = GenerationConfig {
        num_members: 1,
        duration_years: 1.0 + reference_days as f64 / DAYS_PER_YEAR as f64 + 0.01,
        spinup_years: 1.0,
        fault_members: Vec::new(),
        ..config.generation.clone()
    };
    let reference = run_nature(
        config.evaluation.reference_seed_member,
        &ref_config,
        &config.teacher,
    )?;
    lrd_core::datagen::write_member_file(&corpus_dir.join("reference.lrd"), &reference.traj)?;

    let day_len = EvalWorld::day_len(&config.teacher);
    let day0 = (reference.traj.frame_times[0] / day_len).round() as i64;
    for label in [LeadLabel::Medium, LeadLabel::S2s, LeadLabel::Seasonal] {
        let spec = LeadSpec::for_label(label);
        let clim = lrd_core::targets::compute_climatology(
            &reference.traj,
            &spec,
            config.generation.save_window,
            config.evaluation.reference_years,
            |f| ((day0 + f as i64).rem_euclid(DAYS_PER_YEAR as i64)) as usize,
        )?;
        lrd_core::targets::write_climatology(
            &corpus_dir.join(format!("clim_{}.lrc", label.as_str())),
            &clim,
        )?;
    }

    let summary = GenerateSummary {
        provenance: config.provenance(),
        members: dataset.manifest.members.len(),
        stable_members: dataset.manifest.members.iter().filter(|m| !m.pruned).count(),
        pruned_members: dataset
            .manifest
            .members
            .iter()
            .filter(|m| m.pruned)
            .map(|m| m.id)
            .collect(),
        train_members: dataset.manifest.train_members.len(),
        val_members: dataset.manifest.val_members.len(),
        frames_per_member: dataset.manifest.config.frames_per_member(),
        normalizer_mean: dataset.manifest.normalizer.mean,
        normalizer_std: dataset.manifest.normalizer.std,
    };
    let dir = out_dir(config)?;
    write_json(&dir.join("generation_summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub provenance: crate::config::Provenance,
    pub lead: String,
    pub steps: usize,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub num_params: usize,
    pub checkpoint: String,
}

fn lead_index(label: LeadLabel) -> u64 {
    match label {
        LeadLabel::Medium => 0,
        LeadLabel::S2s => 1,
        LeadLabel::Seasonal => 2,
    }
}

/// Train one distilled student for the given lead.
pub fn cmd_train(config: &ExperimentConfig, lead: LeadLabel) -> Result<TrainSummary> {
    let dataset = open_corpus(config)?;
    let spec = LeadSpec::for_label(lead);
    let (train_pool, val_pool) = build_pools(config, &dataset, spec)?;
    let dir = out_dir(config)?;
    let curves = dir.join(format!("curves_{}.csv", lead.as_str()));
    if curves.exists() {
        std::fs::remove_file(&curves)?;
    }
    let mut tc = config
        .training
        .train_config(rng::derive_seed(config.experiment.seed, SEED_TRAIN, lead_index(lead)));
    tc.curves_csv = Some(curves);
    tc.checkpoint_on_divergence = Some(dir.join(format!("model_{}_diverged.lrkp", lead.as_str())));

    let arch = student_arch(config);
    let result = train(arch, &train_pool, &val_pool, &tc)?;
    let checkpoint = format!("model_{}.lrkp", lead.as_str());
    save_checkpoint(
        &dir.join(&checkpoint),
        &result.params,
        Some(&result.adam),
        result.best_step as u64,
        "diffusion",
    )?;

    let last = result.curves.last().unwrap();
    let summary = TrainSummary {
        provenance: config.provenance(),
        lead: lead.as_str().to_string(),
        steps: tc.steps,
        best_step: result.best_step,
        best_val_loss: result.best_val_loss,
        final_train_loss: last.train_loss,
        final_val_loss: last.val_loss,
        num_params: result.params.data.len(),
        checkpoint,
    };
    write_json(&dir.join(format!("train_summary_{}.json", lead.as_str())), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct CalibrationReport {
    pub provenance: crate::config::Provenance,
    pub sweep: Vec<SweepPoint>,
    pub climatological_spread: f64,
    pub prob_clim_crps: f64,
    pub det_clim_crps: f64,
    pub tuned: Option<lrd_core::perturb::TunedAmplitude>,
    pub amplitude: f64,
}

fn medium_world(config: &ExperimentConfig, dates: usize) -> Result<EvalWorld> {
    let dataset = open_corpus(config)?;
    build_eval_world(
        &config.teacher,
        dataset.manifest.normalizer,
        &config.generation,
        LeadLabel::Medium,
        dates,
        config.evaluation.spacing_medium,
        config.evaluation.reference_years,
        config.evaluation.nature_seed_member,
        config.evaluation.reference_seed_member,
    )
}

/// Classifier-free-guidance sweep on the medium-range student.
pub fn cmd_calibrate(config: &ExperimentConfig) -> Result<CalibrationReport> {
    let params = load_model(config, "model_medium.lrkp")?;
    let dates = config.calibration.eval_dates;
    let world = medium_world(config, dates)?;
    let days = eval_days(&world, dates, config.evaluation.spacing_medium)?;
    let (pert, tuned) = resolve_perturbation(config, &world)?;
    let seed = rng::derive_seed(config.experiment.seed, SEED_EVAL, 0);
    let cases = build_cases(&world, &days, Some(&pert), seed)?;

    let sigma = config.training.sigma_spec();
    let base = lrd_core::sampler::SamplerConfig {
        ensemble_size: config.calibration.ensemble_size,
        ..config.sampler.sampler_config(&sigma)
    };
    let sweep = guidance_sweep(
        &params,
        &cases,
        &config.calibration.weights,
        &sigma,
        &base,
        LeadLabel::Medium,
        seed,
    )?;

    let (det, prob) = climatology_baselines(&world, &days);
    let truths: Vec<&[f64]> = cases.iter().map(|c| c.truth.as_slice()).collect();
    let prob_pairs: Vec<(&EnsembleForecast, &[f64])> =
        prob.iter().zip(truths.iter().copied()).collect();
    let det_pairs: Vec<(&EnsembleForecast, &[f64])> =
        det.iter().zip(truths.iter().copied()).collect();
    let climatological_spread = verify::ensemble_spread(&prob_pairs)?;
    let prob_clim_crps = verify::mean_crps(&prob_pairs)?;
    let det_clim_crps = verify::mean_crps(&det_pairs)?;

    let report = CalibrationReport {
        provenance: config.provenance(),
        sweep,
        climatological_spread,
        prob_clim_crps,
        det_clim_crps,
        amplitude: pert.amplitude,
        tuned,
    };
    let dir = out_dir(config)?;
    let mut csv = String::from("w,spread,rmse,crps,spread_skill,clim_spread,prob_clim_crps,det_clim_crps\n");
    for p in &report.sweep {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.weight,
            p.spread,
            p.rmse,
            p.crps,
            p.spread_skill,
            climatological_spread,
            prob_clim_crps,
            det_clim_crps
        ));
    }
    std::fs::write(dir.join("calibration.csv"), csv)?;
    write_json(&dir.join("calibration.json"), &report)?;

    let spread_series = vec![
        (
            "ensemble spread".to_string(),
            report.sweep.iter().map(|p| (p.weight, p.spread)).collect::<Vec<_>>(),
        ),
        (
            "climatological spread".to_string(),
            report
                .sweep
                .iter()
                .map(|p| (p.weight, climatological_spread))
                .collect::<Vec<_>>(),
        ),
    ];
    svg::line_plot(
        &dir.join("calibration_spread.svg"),
        "Ensemble spread vs guidance weight",
        "guidance weight",
        "spread",
        &spread_series,
        false,
        false,
    )?;
    let crps_series = vec![
        (
            "student CRPS".to_string(),
            report.sweep.iter().map(|p| (p.weight, p.crps)).collect::<Vec<_>>(),
        ),
        (
            "probabilistic climatology".to_string(),
            report.sweep.iter().map(|p| (p.weight, prob_clim_crps)).collect::<Vec<_>>(),
        ),
        (
            "deterministic climatology".to_string(),
            report.sweep.iter().map(|p| (p.weight, det_clim_crps)).collect::<Vec<_>>(),
        ),
    ];
    svg::line_plot(
        &dir.join("calibration_crps.svg"),
        "CRPS vs guidance weight",
        "guidance weight",
        "crps",
        &crps_series,
        false,
        false,
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// perfect-model
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct PerfectModelReport {
    pub provenance: crate::config::Provenance,
    pub lead: String,
    pub num_dates: usize,
    pub student: verify::ScoreReport,
    pub teacher_ensemble: verify::ScoreReport,
    pub det_climatology: verify::ScoreReport,
    pub prob_climatology: verify::ScoreReport,
    /// RMSE of the deterministic teacher launched from the exact nature
    /// state; identically zero in the perfect-model setting.
    pub teacher_perfect_rmse: f64,
    pub amplitude: f64,
    pub tuned: Option<lrd_core::perturb::TunedAmplitude>,
}

/// Full perfect-model protocol at one lead: nature run, perturbed
/// initial conditions, student and teacher ensembles, climatology
/// baselines, verification with significance and intervals.
pub fn cmd_perfect_model(config: &ExperimentConfig, lead: LeadLabel) -> Result<PerfectModelReport> {
    let model_name = format!("model_{}.lrkp", lead.as_str());
    let params = load_model(config, &model_name)?;
    let dataset = open_corpus(config)?;
    let num_dates = config.evaluation.num_dates;
    let spacing = config.evaluation.spacing(lead);
    let world = build_eval_world(
        &config.teacher,
        dataset.manifest.normalizer,
        &config.generation,
        lead,
        num_dates,
        spacing,
        config.evaluation.reference_years,
        config.evaluation.nature_seed_member,
        config.evaluation.reference_seed_member,
    )?;
    let days = eval_days(&world, num_dates, spacing)?;
    let (pert, tuned) = resolve_perturbation(config, &world)?;
    let seed = rng::derive_seed(config.experiment.seed, SEED_EVAL, lead_index(lead));
    let cases = build_cases(&world, &days, Some(&pert), seed)?;

    let sigma = config.training.sigma_spec();
    let sampler_config = config.sampler.sampler_config(&sigma);
    let student_fcsts = forecast_cases(&params, &cases, &sigma, &sampler_config, lead, seed)?;

    let teacher_fcsts = crate::protocol::teacher_ensembles(
        &world,
        &days,
        Some(&pert),
        pert.amplitude * config.perturbation.teacher_extra_frac,
        sampler_config.ensemble_size,
        seed,
    )?;
    // Deterministic teacher from the exact state: zero-RMSE sanity leg.
    let perfect = crate::protocol::teacher_ensembles(&world, &days, None, 0.0, 1, seed)?;
    let truths: Vec<&[f64]> = cases.iter().map(|c| c.truth.as_slice()).collect();
    let perfect_pairs: Vec<(&EnsembleForecast, &[f64])> =
        perfect.iter().zip(truths.iter().copied()).collect();
    let teacher_perfect_rmse = verify::ensemble_mean_rmse(&perfect_pairs)?;

    let (det, prob) = climatology_baselines(&world, &days);
    let mut student = score_system("student", &student_fcsts, &cases)?;
    let mut teacher = score_system("teacher_ensemble", &teacher_fcsts, &cases)?;
    let det_scores = score_system("det_climatology", &det, &cases)?;
    let prob_scores = score_system("prob_climatology", &prob, &cases)?;

    let k = world.params.k;
    let alpha = config.evaluation.alpha;
    let n_boot = config.evaluation.n_boot;
    compare_systems(&mut student, &det_scores, k, alpha, n_boot, seed)?;
    compare_systems(&mut student, &prob_scores, k, alpha, n_boot, seed + 1)?;
    compare_systems(&mut teacher, &prob_scores, k, alpha, n_boot, seed + 2)?;

    let dir = out_dir(config)?;
    let tag = lead.as_str();
    student
        .report
        .write_cases_csv(&dir.join(format!("scores_student_{tag}.csv")))?;
    teacher
        .report
        .write_cases_csv(&dir.join(format!("scores_teacher_{tag}.csv")))?;
    det_scores
        .report
        .write_cases_csv(&dir.join(format!("scores_detclim_{tag}.csv")))?;
    prob_scores
        .report
        .write_cases_csv(&dir.join(format!("scores_probclim_{tag}.csv")))?;
    for comp in &student.report.comparisons {
        if let Some(sig) = &comp.significance {
            verify::write_significance_csv(
                &dir.join(format!(
                    "significance_student_vs_{}_{tag}.csv",
                    comp.baseline
                )),
                sig,
            )?;
        }
    }
    svg::ring_heatmap(
        &dir.join(format!("crps_map_{tag}.svg")),
        &format!("Time-mean CRPS per gridpoint ({tag})"),
        &[
            ("student".to_string(), student.report.per_gridpoint.clone()),
            ("teacher ensemble".to_string(), teacher.report.per_gridpoint.clone()),
            ("det climatology".to_string(), det_scores.report.per_gridpoint.clone()),
            ("prob climatology".to_string(), prob_scores.report.per_gridpoint.clone()),
        ],
    )?;

    let report = PerfectModelReport {
        provenance: config.provenance(),
        lead: tag.to_string(),
        num_dates,
        student: student.report,
        teacher_ensemble: teacher.report,
        det_climatology: det_scores.report,
        prob_climatology: prob_scores.report,
        teacher_perfect_rmse,
        amplitude: pert.amplitude,
        tuned,
    };
    write_json(&dir.join(format!("report_perfect_{tag}.json")), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// scaling
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct ScalingRow {
    pub years: f64,
    pub min_val_loss: f64,
    pub val_ci_low: f64,
    pub val_ci_high: f64,
    pub s2s_crps: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Percent rise of the final validation loss above its minimum.
    pub val_rise_pct: f64,
    /// Train loss still falling at the end (below its value at the
    /// validation minimum).
    pub train_still_falling: bool,
    /// |final val - final train| as a percentage of the final val loss.
    pub final_gap_pct: f64,
}

#[derive(Debug, Serialize)]
pub struct ScalingReport {
    pub provenance: crate::config::Provenance,
    pub rows: Vec<ScalingRow>,
}

fn years_label(y: f64) -> String {
    if y.fract() == 0.0 {
        format!("{}", y as u64)
    } else {
        format!("{y}")
    }
}

fn scaling_generation(config: &ExperimentConfig, years: f64) -> GenerationConfig {
    let members = ((years / 25.0).ceil() as usize).max(4);
    let spinup = 2.0;
    GenerationConfig {
        num_members: members,
        duration_years: spinup + years / members as f64,
        spinup_years: spinup,
        fault_members: Vec::new(),
        ..config.generation.clone()
    }
}

/// Dataset-size scaling study at the S2S lead: equal training budget on
/// corpora spanning orders of magnitude, scored on a shared nature run.
pub fn cmd_scaling(config: &ExperimentConfig) -> Result<ScalingReport> {
    let lead = LeadLabel::S2s;
    let spec = LeadSpec::s2s();
    let dir = out_dir(config)?;
    let sigma = config.training.sigma_spec();

    let mut rows = Vec::new();
    let mut crps_curve = Vec::new();
    let mut val_curve = Vec::new();
    for (yi, &years) in config.scaling.year_grid.iter().enumerate() {
        let label = years_label(years);
        let corpus_dir = config.data_root().join(format!("scaling_{label}"));
        let gen = GenerationConfig {
            seed: rng::derive_seed(config.experiment.seed, SEED_SCALING, yi as u64),
            ..scaling_generation(config, years)
        };
        let dataset = if corpus_dir.join("manifest.json").exists() {
            Dataset::open(&corpus_dir)?
        } else {
            Dataset::generate(&corpus_dir, &gen, &config.teacher)?
        };

        let (train_pool, val_pool) = build_pools(config, &dataset, spec)?;
        let curves = dir.join(format!("curves_scaling_{label}.csv"));
        if curves.exists() {
            std::fs::remove_file(&curves)?;
        }
        let tc = TrainConfig {
            steps: config.scaling.steps,
            curves_csv: Some(curves),
            ..config
                .training
                .train_config(rng::derive_seed(config.experiment.seed, SEED_SCALING, 100 + yi as u64))
        };
        let arch = student_arch(config);
        let result = train(arch, &train_pool, &val_pool, &tc)?;
        save_checkpoint(
            &dir.join(format!("model_scaling_{label}.lrkp")),
            &result.params,
            Some(&result.adam),
            result.best_step as u64,
            "diffusion",
        )?;

        // Shared nature-run evaluation with this corpus's normalizer.
        let world = build_eval_world(
            &config.teacher,
            dataset.manifest.normalizer,
            &config.generation,
            lead,
            config.scaling.eval_dates,
            config.evaluation.spacing_s2s,
            config.evaluation.reference_years,
            config.evaluation.nature_seed_member,
            config.evaluation.reference_seed_member,
        )?;
        let days = eval_days(&world, config.scaling.eval_dates, config.evaluation.spacing_s2s)?;
        let (pert, _) = resolve_perturbation(config, &world)?;
        let seed = rng::derive_seed(config.experiment.seed, SEED_SCALING, 200 + yi as u64);
        let cases = build_cases(&world, &days, Some(&pert), seed)?;
        let sampler_config = lrd_core::sampler::SamplerConfig {
            ensemble_size: config.scaling.ensemble_size,
            ..config.sampler.sampler_config(&sigma)
        };
        let fcsts = forecast_cases(&result.params, &cases, &sigma, &sampler_config, lead, seed)?;
        let scores = score_system("student", &fcsts, &cases)?;
        let (crps_lo, crps_hi) = verify::bootstrap_ci(
            &scores.report.per_case,
            config.evaluation.n_boot,
            0.95,
            seed,
        )?;
        let (val_lo, val_hi) = verify::bootstrap_ci(
            &result.val_losses_at_best,
            config.evaluation.n_boot,
            0.95,
            seed + 1,
        )?;

        // Overfitting diagnostics from the learning curves.
        let final_pt = result.curves.last().unwrap();
        let val_rise_pct = (final_pt.val_loss - result.best_val_loss) / result.best_val_loss * 100.0;
        let train_at_best = result
            .curves
            .iter()
            .filter(|c| c.step <= result.best_step && c.train_loss.is_finite())
            .map(|c| c.train_loss)
            .last()
            .unwrap_or(f64::NAN);
        let train_still_falling = final_pt.train_loss < train_at_best;
        let final_gap_pct =
            (final_pt.val_loss - final_pt.train_loss).abs() / final_pt.val_loss * 100.0;

        crps_curve.push((years, scores.report.global_mean));
        val_curve.push((years, result.best_val_loss));
        rows.push(ScalingRow {
            years,
            min_val_loss: result.best_val_loss,
            val_ci_low: val_lo,
            val_ci_high: val_hi,
            s2s_crps: scores.report.global_mean,
            ci_lo: crps_lo,
            ci_hi: crps_hi,
            val_rise_pct,
            train_still_falling,
            final_gap_pct,
        });
    }

    let mut csv = String::from("years,min_val_loss,s2s_crps,ci_lo,ci_hi\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            years_label(r.years),
            r.min_val_loss,
            r.s2s_crps,
            r.ci_lo,
            r.ci_hi
        ));
    }
    std::fs::write(dir.join("scaling.csv"), csv)?;
    let report = ScalingReport { provenance: config.provenance(), rows };
    write_json(&dir.join("scaling.json"), &report)?;
    svg::line_plot(
        &dir.join("scaling.svg"),
        "S2S skill vs training years",
        "training years",
        "value",
        &[
            ("week-4 CRPS".to_string(), crps_curve),
            ("min val loss".to_string(), val_curve),
        ],
        true,
        true,
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// finetune-eval
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct FinetuneSystemRow {
    pub system: String,
    pub bias_corrected: bool,
    pub crps: f64,
    pub pct_vs_prob_clim: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Serialize)]
pub struct FinetuneReport {
    pub provenance: crate::config::Provenance,
    pub finetuned_final_val_loss: f64,
    pub scratch_final_val_loss: f64,
    pub finetuned_best_val_loss: f64,
    pub scratch_best_val_loss: f64,
    pub prob_clim_crps: f64,
    pub det_clim_crps: f64,
    pub rows: Vec<FinetuneSystemRow>,
}

/// Domain-shift experiment: fine-tune the pretrained S2S student on a
/// short record from a shifted-parameter teacher, train a from-scratch
/// twin at equal budget, bias-correct with a 20-year reforecast
/// climatology, and score against the shifted-domain climatology.
pub fn cmd_finetune_eval(config: &ExperimentConfig) -> Result<FinetuneReport> {
    let pretrained = load_model(config, "model_s2s.lrkp")?;
    let source_dataset = open_corpus(config)?;
    let normalizer = source_dataset.manifest.normalizer;
    let dir = out_dir(config)?;
    let spec = LeadSpec::s2s();
    let day_len = EvalWorld::day_len(&config.teacher);

    let shifted_params = SystemParams {
        f0: config.shifted.f0,
        h: config.shifted.h,
        ..config.teacher.clone()
    };

    // Daily climatologies of both domains, for the alignment shift. The
    // shifted reference also backs the lead-target climatology, so it
    // carries the lead margin.
    let clim_years = config.evaluation.reference_years;
    let ref_days =
        clim_years * DAYS_PER_YEAR + spec.frames_needed(config.generation.save_window) + 8;
    let ref_config = GenerationConfig {
        num_members: 1,
        duration_years: 1.0 + ref_days as f64 / DAYS_PER_YEAR as f64 + 0.01,
        spinup_years: 1.0,
        fault_members: Vec::new(),
        ..config.generation.clone()
    };
    let source_ref = run_nature(
        config.evaluation.reference_seed_member,
        &ref_config,
        &config.teacher,
    )?;
    let target_ref = run_nature(
        config.evaluation.reference_seed_member,
        &ref_config,
        &shifted_params,
    )?;
    let source_daily = daily_climatology_of(&source_ref, clim_years, day_len)?;
    let target_daily = daily_climatology_of(&target_ref, clim_years, day_len)?;

    // Short shifted-domain record.
    let shifted_corpus_dir = config.data_root().join("shifted_corpus");
    let members = config.shifted.members;
    let gen = GenerationConfig {
        seed: rng::derive_seed(config.experiment.seed, SEED_SHIFTED, 0),
        num_members: members,
        duration_years: 2.0 + config.shifted.record_years / members as f64,
        spinup_years: 2.0,
        fault_members: Vec::new(),
        ..config.generation.clone()
    };
    let shifted_dataset = if shifted_corpus_dir.join("manifest.json").exists() {
        Dataset::open(&shifted_corpus_dir)?
    } else {
        Dataset::generate(&shifted_corpus_dir, &gen, &shifted_params)?
    };

    // Shift-then-normalize the shifted-domain trajectories.
    let prep = |ids: &[usize]| -> Result<Vec<Trajectory>> {
        let mut trajs = shifted_dataset.load_split(ids)?;
        for t in trajs.iter_mut() {
            let day0 = (t.frame_times[0] / day_len).round() as i64;
            shift_trajectory(t, &source_daily, &target_daily, day0)?;
            normalize_trajectory(t, &normalizer);
        }
        Ok(trajs)
    };
    let train_pool = SamplePool::new(
        prep(&shifted_dataset.manifest.train_members)?,
        spec,
        config.generation.save_window,
        day_len,
    )?;
    let val_pool = SamplePool::new(
        prep(&shifted_dataset.manifest.val_members)?,
        spec,
        config.generation.save_window,
        day_len,
    )?;

    // Fine-tune and the from-scratch twin at equal step budget.
    let ft_curves = dir.join("curves_finetuned.csv");
    if ft_curves.exists() {
        std::fs::remove_file(&ft_curves)?;
    }
    let ft_config = TrainConfig {
        steps: config.finetune.steps,
        lr: config.finetune.lr,
        curves_csv: Some(ft_curves),
        ..config
            .training
            .train_config(rng::derive_seed(config.experiment.seed, SEED_SHIFTED, 1))
    };
    let finetuned = finetune(&pretrained, &train_pool, &val_pool, &ft_config)?;
    save_checkpoint(
        &dir.join("model_finetuned_s2s.lrkp"),
        &finetuned.params,
        Some(&finetuned.adam),
        finetuned.best_step as u64,
        "diffusion",
    )?;

    let sc_curves = dir.join("curves_scratch.csv");
    if sc_curves.exists() {
        std::fs::remove_file(&sc_curves)?;
    }
    let sc_config = TrainConfig {
        steps: config.finetune.steps,
        lr: config.training.lr,
        curves_csv: Some(sc_curves),
        ..config
            .training
            .train_config(rng::derive_seed(config.experiment.seed, SEED_SHIFTED, 2))
    };
    let scratch = train(student_arch(config), &train_pool, &val_pool, &sc_config)?;
    save_checkpoint(
        &dir.join("model_scratch_s2s.lrkp"),
        &scratch.params,
        Some(&scratch.adam),
        scratch.best_step as u64,
        "diffusion",
    )?;

    // Evaluation world on the shifted nature run, aligned to the source
    // domain before climatology and case construction.
    let margin = spec.frames_needed(config.generation.save_window);
    let eval_dates = config.finetune.eval_dates;
    let spacing = config.evaluation.spacing_s2s;
    // Nature must cover 20 reforecast years before the evaluation span.
    let reforecast_years = clim_years;
    let eval_span_days = eval_dates * spacing + margin + 8;
    let nature_config = GenerationConfig {
        num_members: 1,
        duration_years: 2.0
            + reforecast_years as f64
            + eval_span_days as f64 / DAYS_PER_YEAR as f64
            + 0.05,
        spinup_years: 2.0,
        fault_members: Vec::new(),
        ..config.generation.clone()
    };
    let mut nature = run_nature(
        config.evaluation.nature_seed_member,
        &nature_config,
        &shifted_params,
    )?;
    let nature_day0 = (nature.traj.frame_times[0] / day_len).round() as i64;
    shift_trajectory(&mut nature.traj, &source_daily, &target_daily, nature_day0)?;

    let mut target_ref_shifted = target_ref;
    let ref_day0 = (target_ref_shifted.traj.frame_times[0] / day_len).round() as i64;
    shift_trajectory(
        &mut target_ref_shifted.traj,
        &source_daily,
        &target_daily,
        ref_day0,
    )?;
    let clim = lrd_core::targets::compute_climatology(
        &target_ref_shifted.traj,
        &spec,
        config.generation.save_window,
        clim_years,
        |f| ((ref_day0 + f as i64).rem_euclid(DAYS_PER_YEAR as i64)) as usize,
    )?;
    let world = EvalWorld {
        params: shifted_params.clone(),
        normalizer,
        nature,
        spec,
        save_window: config.generation.save_window,
        clim,
        day0: nature_day0,
    };

    // Evaluation days start after the reforecast record.
    let start = reforecast_years * DAYS_PER_YEAR + 3;
    let days: Vec<usize> = (0..eval_dates).map(|i| start + i * spacing).collect();
    if days.last().unwrap() + margin >= world.nature.traj.num_frames() {
        return Err(Error::InsufficientData {
            context: "finetune evaluation span",
            need: days.last().unwrap() + margin + 1,
            have: world.nature.traj.num_frames(),
        });
    }
    let (pert, _) = resolve_perturbation(config, &world)?;
    let seed = rng::derive_seed(config.experiment.seed, SEED_SHIFTED, 3);
    let cases = build_cases(&world, &days, Some(&pert), seed)?;

    let sigma = config.training.sigma_spec();
    let eval_sampler = lrd_core::sampler::SamplerConfig {
        ensemble_size: config.finetune.eval_ensemble,
        ..config.sampler.sampler_config(&sigma)
    };
    let reforecast_sampler = lrd_core::sampler::SamplerConfig {
        ensemble_size: config.finetune.reforecast_ensemble,
        ..eval_sampler
    };

    // Reforecast-based bias table per model, from the 20 prior years at
    // each evaluation day-of-year.
    let bias_table = |model: &NetParams, tag: u64| -> Result<verify::BiasTable> {
        let mut reforecast_days = Vec::new();
        for day in &days {
            for y in 1..=reforecast_years {
                reforecast_days.push(day - y * DAYS_PER_YEAR);
            }
        }
        let rf_cases = build_cases(&world, &reforecast_days, Some(&pert), seed + 10 + tag)?;
        let rf_fcsts = forecast_cases(
            model,
            &rf_cases,
            &sigma,
            &reforecast_sampler,
            spec.label,
            seed + 20 + tag,
        )?;
        let records: Vec<ReforecastRecord> = rf_fcsts
            .iter()
            .zip(&rf_cases)
            .map(|(f, c)| ReforecastRecord {
                doy: c.init_doy,
                ens_mean: f.ensemble_mean(),
                truth: c.truth.clone(),
            })
            .collect();
        verify::reforecast_bias(&records, reforecast_years)
    };

    let (det, prob) = climatology_baselines(&world, &days);
    let det_scores = score_system("det_climatology", &det, &cases)?;
    let prob_scores = score_system("prob_climatology", &prob, &cases)?;

    let mut rows = Vec::new();
    let mut score_model = |name: &str, model: &NetParams, tag: u64| -> Result<()> {
        let fcsts = forecast_cases(model, &cases, &sigma, &eval_sampler, spec.label, seed + tag)?;
        let table = bias_table(model, tag)?;
        let mut corrected = fcsts.clone();
        let doys: Vec<usize> = cases.iter().map(|c| c.init_doy).collect();
        verify::bias_correct(&mut corrected, &doys, &table)?;
        for (bias_corrected, set) in [(false, &fcsts), (true, &corrected)] {
            let scores = score_system(name, set, &cases)?;
            let (per_case, mean) = verify::percent_change_vs_baseline(
                &scores.report.per_case,
                &prob_scores.report.per_case,
            )?;
            let (lo, hi) =
                verify::bootstrap_ci(&per_case, config.evaluation.n_boot, 0.95, seed + tag)?;
            rows.push(FinetuneSystemRow {
                system: name.to_string(),
                bias_corrected,
                crps: scores.report.global_mean,
                pct_vs_prob_clim: mean,
                ci_lo: lo,
                ci_hi: hi,
            });
        }
        Ok(())
    };
    score_model("finetuned", &finetuned.params, 100)?;
    score_model("scratch", &scratch.params, 200)?;

    let report = FinetuneReport {
        provenance: config.provenance(),
        finetuned_final_val_loss: finetuned.curves.last().unwrap().val_loss,
        scratch_final_val_loss: scratch.curves.last().unwrap().val_loss,
        finetuned_best_val_loss: finetuned.best_val_loss,
        scratch_best_val_loss: scratch.best_val_loss,
        prob_clim_crps: prob_scores.report.global_mean,
        det_clim_crps: det_scores.report.global_mean,
        rows,
    };
    let mut csv = String::from("system,bias_corrected,crps,pct_vs_prob_clim,ci_lo,ci_hi\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.system, r.bias_corrected, r.crps, r.pct_vs_prob_clim, r.ci_lo, r.ci_hi
        ));
    }
    std::fs::write(dir.join("finetune_eval.csv"), csv)?;
    write_json(&dir.join("finetune_eval.json"), &report)?;

    let curves_plot: Vec<(String, Vec<(f64, f64)>)> = vec![
        (
            "finetuned val".to_string(),
            finetuned
                .curves
                .iter()
                .map(|c| (c.step as f64, c.val_loss))
                .collect(),
        ),
        (
            "scratch val".to_string(),
            scratch
                .curves
                .iter()
                .map(|c| (c.step as f64, c.val_loss))
                .collect(),
        ),
    ];
    svg::line_plot(
        &dir.join("finetune_curves.svg"),
        "Fine-tuning vs from-scratch on the shifted domain",
        "step",
        "validation loss",
        &curves_plot,
        false,
        false,
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// qr-baseline
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct QrReport {
    pub provenance: crate::config::Provenance,
    pub lead: String,
    pub initial_val_ce: f64,
    pub best_val_ce: f64,
    pub model_rps: f64,
    pub uniform_rps: f64,
    pub eval_cases: usize,
}

/// Quintile-classification baseline on the active lead.
pub fn cmd_qr_baseline(config: &ExperimentConfig) -> Result<QrReport> {
    let dataset = open_corpus(config)?;
    let lead = config.active_lead()?;
    let spec = LeadSpec::for_label(lead);
    let dir = out_dir(config)?;
    let normalizer = dataset.manifest.normalizer;

    // Quintile edges from the normalized reference climatology.
    let clim_path = config.corpus_dir().join(format!("clim_{}.lrc", lead.as_str()));
    if !clim_path.exists() {
        return Err(Error::MissingInput(clim_path.display().to_string()));
    }
    let raw_clim = lrd_core::targets::read_climatology(&clim_path)?;
    let clim = LeadClimatology {
        k: raw_clim.k,
        window_years: raw_clim.window_years,
        det: normalizer.normalize_slice(&raw_clim.det),
        prob: normalizer.normalize_slice(&raw_clim.prob),
    };
    let edges = qrbaseline::fit_quintiles(&clim)?;

    let (train_pool, val_pool) = build_pools(config, &dataset, spec)?;
    let arch = Arch::quantile(
        config.teacher.k,
        config.training.width,
        config.training.depth,
        config.training.kernel,
    );
    let seed = rng::derive_seed(config.experiment.seed, SEED_QR, lead_index(lead));
    let curves = dir.join(format!("curves_qr_{}.csv", lead.as_str()));
    if curves.exists() {
        std::fs::remove_file(&curves)?;
    }
    let tc = TrainConfig {
        steps: config.scaling.steps,
        curves_csv: Some(curves),
        ..config.training.train_config(seed)
    };
    let init = NetParams::init(arch, seed, true)?;
    let edges_train = edges.clone();
    let edges_val = edges.clone();
    let result = train_qr(init, &train_pool, &val_pool, &tc, edges_train, edges_val)?;
    save_checkpoint(
        &dir.join(format!("model_qr_{}.lrkp", lead.as_str())),
        &result.params,
        Some(&result.adam),
        result.best_step as u64,
        "quantile",
    )?;

    let eval_set = val_pool.fixed_subset(tc.max_val_samples)?;
    let eval = qrbaseline::qr_evaluate(&result.params, &eval_set, &edges)?;
    let report = QrReport {
        provenance: config.provenance(),
        lead: lead.as_str().to_string(),
        initial_val_ce: result.curves.first().unwrap().val_loss,
        best_val_ce: result.best_val_loss,
        model_rps: eval.model_rps,
        uniform_rps: eval.uniform_rps,
        eval_cases: eval.cases,
    };
    write_json(&dir.join(format!("qr_baseline_{}.json", lead.as_str())), &report)?;
    Ok(report)
}

fn train_qr(
    init: NetParams,
    train_pool: &SamplePool,
    val_pool: &SamplePool,
    config: &TrainConfig,
    edges_train: QuintileEdges,
    edges_val: QuintileEdges,
) -> Result<TrainResult> {
    run_training(
        init,
        None,
        train_pool,
        val_pool,
        config,
        move |p, batch, _rng| qrbaseline::qr_loss(p, batch, &edges_train),
        &move |p, batch| qrbaseline::qr_per_sample_losses(p, batch, &edges_val),
    )
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Consolidate every JSON artifact in the output directory and refresh
/// the learning-curve plots from their CSVs.
pub fn cmd_report(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return Err(Error::MissingInput(dir.display().to_string()));
    }
    let mut consolidated = std::collections::BTreeMap::new();
    let mut curve_series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        if name.ends_with(".json") && name != "report.json" {
            let value: serde_json::Value = serde_json::from_slice(&std::fs::read(&path)?)?;
            consolidated.insert(name, value);
        } else if name.starts_with("curves_") && name.ends_with(".csv") {
            let text = std::fs::read_to_string(&path)?;
            let mut points = Vec::new();
            for line in text.lines().skip(1) {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() == 3 {
                    if let (Ok(step), Ok(val)) = (cols[0].parse::<f64>(), cols[2].parse::<f64>()) {
                        points.push((step, val));
                    }
                }
            }
            let label = name
                .trim_start_matches("curves_")
                .trim_end_matches(".csv")
                .to_string();
            curve_series.push((label, points));
        }
    }
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_vec_pretty(&consolidated)?,
    )?;
    if !curve_series.is_empty() {
        svg::line_plot(
            &dir.join("learning_curves.svg"),
            "Validation losses",
            "step",
            "val loss",
            &curve_series,
            false,
            false,
        )?;
    }
    Ok(())
}

