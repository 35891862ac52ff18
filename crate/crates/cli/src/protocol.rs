//! Shared experiment machinery: nature runs, climatological baselines,
//! perturbed initial conditions, student and teacher ensembles, and the
//! scoring glue used by the experiment commands.
//!
//! All fields handed to models and scores are in normalized units (the
//! corpus normalizer); climatologies are computed on raw trajectories
//! and normalized at use time.

use crate::config::ExperimentConfig;
use lrd_core::datagen::{
    run_nature, teacher_forecast_frames, GenerationConfig, NatureRun, Normalizer, Trajectory,
    DAYS_PER_YEAR, STEPS_PER_DAY,
};
use lrd_core::dynsys::SystemParams;
use lrd_core::error::{Error, Result};
use lrd_core::perturb::{correlated_noise, noise_newest_first, perturb_ic, PerturbationSpec};
use lrd_core::rng::{self, stream};
use lrd_core::sampler::{EnsembleForecast, ForecastCase};
use lrd_core::targets::{
    build_conditioning, build_target, compute_climatology, compute_daily_climatology, DailyClimatology, LeadClimatology, LeadLabel, LeadSpec, CONDITIONING_FRAMES,
};
use lrd_core::verify;
use rayon::prelude::*;
use serde::Serialize;

/// Everything needed to run and score one evaluation campaign.
pub struct EvalWorld {
    pub params: SystemParams,
    pub normalizer: Normalizer,
    pub nature: NatureRun,
    pub spec: LeadSpec,
    pub save_window: usize,
    /// Lead-target climatology in raw units, keyed by init day-of-year.
    pub clim: LeadClimatology,
    /// Day index of nature frame 0.
    pub day0: i64,
}

impl EvalWorld {
    pub fn day_len(params: &SystemParams) -> f64 {
        params.step_equiv * STEPS_PER_DAY as f64
    }

    pub fn doy_of_frame(&self, frame: usize) -> usize {
        ((self.day0 + frame as i64).rem_euclid(DAYS_PER_YEAR as i64)) as usize
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        self.normalizer.normalize_slice(raw)
    }
}

/// Generate the withheld nature run and the reference climatology for a
/// lead, sized to cover `num_dates` evaluations at `spacing` days.
pub fn build_eval_world(
    params: &SystemParams,
    normalizer: Normalizer,
    gen_template: &GenerationConfig,
    lead: LeadLabel,
    num_dates: usize,
    spacing: usize,
    reference_years: usize,
    nature_member: usize,
    reference_member: usize,
) -> Result<EvalWorld> {
    let spec = LeadSpec::for_label(lead);
    let save_window = STEPS_PER_DAY;
    let margin = spec.frames_needed(save_window);

    let nature_days = CONDITIONING_FRAMES + num_dates * spacing + margin + 8;
    let spinup_years = 1.0;
    let nature_config = GenerationConfig {
        num_members: 1,
        duration_years: spinup_years + (nature_days as f64 / DAYS_PER_YEAR as f64) + 0.01,
        spinup_years,
        save_window,
        fault_members: Vec::new(),
        ..gen_template.clone()
    };
    let nature = run_nature(nature_member, &nature_config, params)?;

    let reference_days = reference_years * DAYS_PER_YEAR + margin + 8;
    let reference_config = GenerationConfig {
        num_members: 1,
        duration_years: spinup_years + (reference_days as f64 / DAYS_PER_YEAR as f64) + 0.01,
        spinup_years,
        save_window,
        fault_members: Vec::new(),
        ..gen_template.clone()
    };
    let reference = run_nature(reference_member, &reference_config, params)?;
    let day_len = EvalWorld::day_len(params);
    let ref_day0 = (reference.traj.frame_times[0] / day_len).round() as i64;
    let clim = compute_climatology(&reference.traj, &spec, save_window, reference_years, |f| {
        ((ref_day0 + f as i64).rem_euclid(DAYS_PER_YEAR as i64)) as usize
    })?;

    let day0 = (nature.traj.frame_times[0] / day_len).round() as i64;
    Ok(EvalWorld {
        params: params.clone(),
        normalizer,
        nature,
        spec,
        save_window,
        clim,
        day0,
    })
}

/// Evaluation initialization frames: `num_dates` anchors at `spacing`
/// days, starting after the conditioning history.
pub fn eval_days(world: &EvalWorld, num_dates: usize, spacing: usize) -> Result<Vec<usize>> {
    let margin = world.spec.frames_needed(world.save_window);
    let first = CONDITIONING_FRAMES - 1;
    let last_needed = first + (num_dates - 1) * spacing + margin;
    if last_needed >= world.nature.traj.num_frames() {
        return Err(Error::InsufficientData {
            context: "eval_days nature-run frames",
            need: last_needed + 1,
            have: world.nature.traj.num_frames(),
        });
    }
    Ok((0..num_dates).map(|i| first + i * spacing).collect())
}

/// Forecast cases with Matern-perturbed conditioning histories. Noise
/// amplitude is in normalized units; `spec = None` leaves the histories
/// unperturbed.
pub fn build_cases(
    world: &EvalWorld,
    days: &[usize],
    pert: Option<&PerturbationSpec>,
    seed: u64,
) -> Result<Vec<ForecastCase>> {
    let k = world.params.k;
    days.iter()
        .enumerate()
        .map(|(i, day)| {
            let doy = world.doy_of_frame(*day);
            let (cond_raw, phase) = build_conditioning(&world.nature.traj, *day, doy)?;
            let truth_raw = build_target(&world.nature.traj, *day, &world.spec, world.save_window)?;
            let mut conditioning = world.normalize(&cond_raw);
            if let Some(p) = pert {
                let mut rng = rng::stream_rng(seed, stream::PERTURB, i as u64);
                let noise = correlated_noise(&mut rng, p, CONDITIONING_FRAMES, k)?;
                let noise_nf = noise_newest_first(&noise, CONDITIONING_FRAMES, k);
                conditioning = perturb_ic(&conditioning, &noise_nf)?;
            }
            Ok(ForecastCase {
                conditioning,
                phase,
                truth: world.normalize(&truth_raw),
                init_doy: doy,
                init_time: world.nature.traj.frame_times[*day],
            })
        })
        .collect()
}

/// Climatological baselines as pseudo-ensembles per case: deterministic
/// (the 20-year mean, one member) and probabilistic (the 20 yearly
/// targets as members), in normalized units.
pub fn climatology_baselines(
    world: &EvalWorld,
    days: &[usize],
) -> (Vec<EnsembleForecast>, Vec<EnsembleForecast>) {
    let k = world.params.k;
    let mut det = Vec::with_capacity(days.len());
    let mut prob = Vec::with_capacity(days.len());
    for day in days {
        let doy = world.doy_of_frame(*day);
        let t = world.nature.traj.frame_times[*day];
        det.push(EnsembleForecast {
            members: world.normalize(world.clim.deterministic(doy)),
            k,
            init_time: t,
            lead: world.spec.label,
            guidance_weight: 1.0,
            seed: 0,
        });
        let mut members = Vec::with_capacity(world.clim.window_years * k);
        for y in 0..world.clim.window_years {
            members.extend(world.normalize(world.clim.member(doy, y)));
        }
        prob.push(EnsembleForecast {
            members,
            k,
            init_time: t,
            lead: world.spec.label,
            guidance_weight: 1.0,
            seed: 0,
        });
    }
    (det, prob)
}

/// Teacher ensembles from the perturbed initial conditions: the day-0
/// noise that degraded the student's history also displaces the teacher
/// launch state, and each member adds an extra Matern perturbation.
/// With `ic_pert = None` and `extra_amplitude = 0`, member 0 reproduces
/// the nature run exactly.
#[allow(clippy::too_many_arguments)]
pub fn teacher_ensembles(
    world: &EvalWorld,
    days: &[usize],
    ic_pert: Option<&PerturbationSpec>,
    extra_amplitude: f64,
    ensemble_size: usize,
    seed: u64,
) -> Result<Vec<EnsembleForecast>> {
    let k = world.params.k;
    let offsets = world.spec.target_frame_offsets(world.save_window);
    let max_day = *offsets.last().unwrap();
    let std = world.normalizer.std;
    days.par_iter()
        .enumerate()
        .map(|(i, day)| {
            let mut launch = world.nature.day_end_states[*day].clone();
            if let Some(p) = ic_pert {
                // Same stream as build_cases: the day-0 slice of the
                // history noise displaces the teacher launch state.
                let mut rng = rng::stream_rng(seed, stream::PERTURB, i as u64);
                let noise = correlated_noise(&mut rng, p, CONDITIONING_FRAMES, k)?;
                let day0 = &noise[(CONDITIONING_FRAMES - 1) * k..];
                for (x, n) in launch.x.iter_mut().zip(day0) {
                    *x += n * std;
                }
            }
            let mut members = Vec::with_capacity(ensemble_size * k);
            for e in 0..ensemble_size {
                let mut state = launch.clone();
                if extra_amplitude > 0.0 {
                    let extra_spec = PerturbationSpec {
                        amplitude: extra_amplitude,
                        ..ic_pert.copied().unwrap_or_default()
                    };
                    let mut rng = rng::stream_rng(
                        seed,
                        stream::PERTURB,
                        (1 + i as u64) * 10_000 + e as u64,
                    );
                    let extra = correlated_noise(&mut rng, &extra_spec, 1, k)?;
                    for (x, n) in state.x.iter_mut().zip(&extra) {
                        *x += n * std;
                    }
                }
                let frames = teacher_forecast_frames(&state, max_day, &world.params)?;
                let mut target = vec![0.0; k];
                for off in &offsets {
                    for (t, v) in target.iter_mut().zip(&frames[(off - 1) * k..off * k]) {
                        *t += v;
                    }
                }
                let inv = 1.0 / offsets.len() as f64;
                members.extend(target.iter().map(|t| world.normalizer.normalize(t * inv)));
            }
            Ok(EnsembleForecast {
                members,
                k,
                init_time: world.nature.traj.frame_times[*day],
                lead: world.spec.label,
                guidance_weight: 1.0,
                seed,
            })
        })
        .collect()
}

/// Resolve the perturbation spec: fixed amplitude, or tuned so a single
/// perturbed teacher member hits the target fraction of climatological
/// day-7 RMSE.
pub fn resolve_perturbation(
    config: &ExperimentConfig,
    world: &EvalWorld,
) -> Result<(PerturbationSpec, Option<lrd_core::perturb::TunedAmplitude>)> {
    let base = PerturbationSpec {
        amplitude: config.perturbation.amplitude,
        length_scale: config.perturbation.length_scale,
        time_scale: config.perturbation.time_scale,
    };
    if config.perturbation.mode == "fixed" {
        return Ok((base, None));
    }
    // Climatological day-7 RMSE of the deterministic-climatology
    // forecast over the tuning days, in normalized units.
    let lead_days = 7;
    let tune_cases = config.perturbation.tune_cases;
    let usable = world.nature.traj.num_frames() - lead_days - 1;
    let case_days: Vec<usize> = (0..tune_cases).map(|i| i * usable / tune_cases).collect();
    let mut acc = 0.0;
    for day in &case_days {
        let doy = world.doy_of_frame(day + lead_days);
        let det = world.clim.deterministic(doy);
        let truth = world.nature.traj.frame(day + lead_days);
        for (d, t) in det.iter().zip(truth) {
            let e = (d - t) / world.normalizer.std;
            acc += e * e;
        }
    }
    let clim_rmse = (acc / (case_days.len() * world.params.k) as f64).sqrt();
    let target = config.perturbation.tune_target_frac * clim_rmse;
    let tuned = lrd_core::perturb::tune_amplitude(
        &world.nature,
        &world.params,
        world.normalizer.std,
        &base,
        target,
        tune_cases,
        config.experiment.seed,
        lead_days,
    )?;
    let spec = PerturbationSpec { amplitude: tuned.amplitude, ..base };
    Ok((spec, Some(tuned)))
}

/// Normalize a trajectory's frames in place.
pub fn normalize_trajectory(traj: &mut Trajectory, normalizer: &Normalizer) {
    for v in traj.frames.iter_mut() {
        *v = normalizer.normalize(*v);
    }
}

/// Subtract the per-day-of-year climatology difference from every frame
/// of a target-domain trajectory, aligning it with the source domain.
pub fn shift_trajectory(
    traj: &mut Trajectory,
    source: &DailyClimatology,
    target: &DailyClimatology,
    day0: i64,
) -> Result<()> {
    if source.k != traj.k || target.k != traj.k {
        return Err(Error::ShapeMismatch {
            context: "shift_trajectory gridpoints",
            expected: traj.k,
            actual: source.k,
        });
    }
    let k = traj.k;
    for f in 0..traj.num_frames() {
        let doy = ((day0 + f as i64).rem_euclid(DAYS_PER_YEAR as i64)) as usize;
        let src = source.at(doy);
        let tgt = target.at(doy);
        for g in 0..k {
            traj.frames[f * k + g] -= tgt[g] - src[g];
        }
    }
    Ok(())
}

/// Daily climatology of a raw reference run.
pub fn daily_climatology_of(nature: &NatureRun, years: usize, day_len: f64) -> Result<DailyClimatology> {
    let day0 = (nature.traj.frame_times[0] / day_len).round() as i64;
    compute_daily_climatology(&nature.traj, years, |f| {
        ((day0 + f as i64).rem_euclid(DAYS_PER_YEAR as i64)) as usize
    })
}

/// Scores and baseline comparisons for one system.
#[derive(Debug, Clone, Serialize)]
pub struct SystemScores {
    pub report: verify::ScoreReport,
    pub crps_case_grid: Vec<f64>,
}

pub fn score_system(
    name: &str,
    forecasts: &[EnsembleForecast],
    cases: &[ForecastCase],
) -> Result<SystemScores> {
    let pairs: Vec<(&EnsembleForecast, &[f64])> = forecasts
        .iter()
        .zip(cases.iter().map(|c| c.truth.as_slice()))
        .collect();
    let report = verify::ScoreReport::crps(name, &pairs)?;
    let crps_case_grid = verify::crps_case_grid(&pairs)?;
    Ok(SystemScores { report, crps_case_grid })
}

/// Attach a percent-change + bootstrap-CI + significance comparison of
/// `system` against `baseline` to the system's report.
pub fn compare_systems(
    system: &mut SystemScores,
    baseline: &SystemScores,
    k: usize,
    alpha: f64,
    n_boot: usize,
    seed: u64,
) -> Result<()> {
    let (per_case, mean) =
        verify::percent_change_vs_baseline(&system.report.per_case, &baseline.report.per_case)?;
    let (lo, hi) = verify::bootstrap_ci(&per_case, n_boot, 0.95, seed)?;
    let sig = verify::significance_map(&system.crps_case_grid, &baseline.crps_case_grid, k, alpha)?;
    system.report.comparisons.push(verify::Comparison {
        baseline: baseline.report.name.clone(),
        percent_change_mean: mean,
        ci_low: lo,
        ci_high: hi,
        significance: Some(sig),
    });
    Ok(())
}
