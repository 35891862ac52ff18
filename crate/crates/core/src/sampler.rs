//! Deterministic ODE sampling of the trained denoiser.
//!
//! The probability-flow ODE `dx/dsigma = (x - D(x, sigma)) / sigma` is
//! integrated with second-order Heun steps down a rho-spaced sigma
//! schedule, with a plain Euler step into sigma = 0. Classifier-free
//! guidance blends the conditional and unconditional denoisers at every
//! step; `w = 1` bypasses the unconditional evaluation entirely.

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::student::{student_forward, NetParams, SigmaSpec};
use crate::targets::LeadLabel;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Schedule exponent.
    pub rho: f64,
    /// Classifier-free guidance weight.
    pub guidance_weight: f64,
    pub ensemble_size: usize,
    /// Stochastic churn; kept at zero (deterministic ODE sampling).
    pub s_churn: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 18,
            sigma_min: 0.002,
            sigma_max: 200.0,
            rho: 7.0,
            guidance_weight: 1.0,
            ensemble_size: 32,
            s_churn: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn from_sigma_spec(spec: &SigmaSpec) -> Self {
        SamplerConfig {
            sigma_min: spec.sigma_min,
            sigma_max: spec.sigma_max,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 1 {
            return Err(Error::config("num_steps must be >= 1"));
        }
        if self.ensemble_size < 1 {
            return Err(Error::config("ensemble_size must be >= 1"));
        }
        if self.guidance_weight < 0.0 {
            return Err(Error::config("guidance weight must be >= 0"));
        }
        if self.s_churn != 0.0 {
            return Err(Error::config("stochastic churn is not supported"));
        }
        Ok(())
    }
}

/// Karras rho-schedule: `num_steps` strictly decreasing noise levels
/// from sigma_max to sigma_min, then a final 0.
pub fn sigma_schedule(config: &SamplerConfig) -> Vec<f64> {
    let n = config.num_steps;
    let mut sigmas = Vec::with_capacity(n + 1);
    if n == 1 {
        sigmas.push(config.sigma_max);
    } else {
        let inv_rho = 1.0 / config.rho;
        let smax = config.sigma_max.powf(inv_rho);
        let smin = config.sigma_min.powf(inv_rho);
        for i in 0..n {
            let frac = i as f64 / (n - 1) as f64;
            sigmas.push((smax + frac * (smin - smax)).powf(config.rho));
        }
        // Pin the endpoints exactly against powf round-trip error.
        sigmas[0] = config.sigma_max;
        sigmas[n - 1] = config.sigma_min;
    }
    sigmas.push(0.0);
    sigmas
}

/// Anything that can denoise a field at a noise level. Implemented by
/// the guided student and by analytic stubs in tests.
pub trait Denoiser: Sync {
    fn grid(&self) -> usize;
    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>>;
}

/// Classifier-free-guided student denoiser for one forecast case.
pub struct GuidedStudent<'a> {
    pub params: &'a NetParams,
    pub conditioning: &'a [f64],
    pub phase: (f64, f64),
    pub sigma_spec: SigmaSpec,
    pub weight: f64,
}

impl Denoiser for GuidedStudent<'_> {
    fn grid(&self) -> usize {
        self.params.arch.grid
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        guided_denoise(
            self.params,
            x,
            sigma,
            self.conditioning,
            self.phase,
            self.weight,
            &self.sigma_spec,
        )
    }
}

/// `D_guided = D_uncond + w (D_cond - D_uncond)`; `w = 1` returns the
/// conditional output without evaluating the unconditional branch.
pub fn guided_denoise(
    params: &NetParams,
    x: &[f64],
    sigma: f64,
    conditioning: &[f64],
    phase: (f64, f64),
    weight: f64,
    spec: &SigmaSpec,
) -> Result<Vec<f64>> {
    if weight == 1.0 {
        return student_forward(params, x, sigma, conditioning, phase, false, spec);
    }
    let uncond = student_forward(params, x, sigma, conditioning, phase, true, spec)?;
    if weight == 0.0 {
        return Ok(uncond);
    }
    let cond = student_forward(params, x, sigma, conditioning, phase, false, spec)?;
    Ok(uncond
        .iter()
        .zip(&cond)
        .map(|(u, c)| u + weight * (c - u))
        .collect())
}

/// One sample from the learned distribution: Heun integration of the
/// probability-flow ODE from `sigma_max` noise down to zero.
pub fn heun_solve<D: Denoiser>(
    denoiser: &D,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    config.validate()?;
    let k = denoiser.grid();
    let sigmas = sigma_schedule(config);
    let mut x: Vec<f64> = (0..k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            config.sigma_max * z
        })
        .collect();

    for i in 0..sigmas.len() - 1 {
        let (s_cur, s_next) = (sigmas[i], sigmas[i + 1]);
        let d_cur = denoiser.denoise(&x, s_cur)?;
        let slope: Vec<f64> = x
            .iter()
            .zip(&d_cur)
            .map(|(xv, dv)| (xv - dv) / s_cur)
            .collect();
        let dt = s_next - s_cur;
        let euler: Vec<f64> = x.iter().zip(&slope).map(|(xv, s)| xv + dt * s).collect();
        x = if s_next > 0.0 {
            // Second-order correction.
            let d_next = denoiser.denoise(&euler, s_next)?;
            let slope_next: Vec<f64> = euler
                .iter()
                .zip(&d_next)
                .map(|(xv, dv)| (xv - dv) / s_next)
                .collect();
            x.iter()
                .zip(slope.iter().zip(&slope_next))
                .map(|(xv, (s0, s1))| xv + dt * 0.5 * (s0 + s1))
                .collect()
        } else {
            euler
        };
        if let Some(idx) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "heun_solve state", index: idx });
        }
    }
    Ok(x)
}

/// One ensemble forecast: `E` independent Heun solves with sub-seeded
/// noise streams, deterministic in `(seed, config)`.
#[derive(Debug, Clone)]
pub struct EnsembleForecast {
    /// [E x K] member fields.
    pub members: Vec<f64>,
    pub k: usize,
    pub init_time: f64,
    pub lead: LeadLabel,
    pub guidance_weight: f64,
    pub seed: u64,
}

impl EnsembleForecast {
    pub fn ensemble_size(&self) -> usize {
        self.members.len() / self.k
    }

    pub fn member(&self, e: usize) -> &[f64] {
        &self.members[e * self.k..(e + 1) * self.k]
    }

    /// Ensemble values at one gridpoint.
    pub fn at_gridpoint(&self, g: usize) -> Vec<f64> {
        (0..self.ensemble_size()).map(|e| self.member(e)[g]).collect()
    }

    pub fn ensemble_mean(&self) -> Vec<f64> {
        let e = self.ensemble_size();
        let mut mean = vec![0.0; self.k];
        for m in 0..e {
            for (acc, v) in mean.iter_mut().zip(self.member(m)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= e as f64);
        mean
    }
}

pub fn generate_ensemble<D: Denoiser>(
    denoiser: &D,
    config: &SamplerConfig,
    init_time: f64,
    lead: LeadLabel,
    seed: u64,
) -> Result<EnsembleForecast> {
    config.validate()?;
    let k = denoiser.grid();
    let members: Vec<Vec<f64>> = (0..config.ensemble_size)
        .into_par_iter()
        .map(|e| {
            let mut rng = rng::stream_rng(seed, stream::SAMPLER, e as u64);
            heun_solve(denoiser, config, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut flat = Vec::with_capacity(config.ensemble_size * k);
    for m in members {
        flat.extend(m);
    }
    Ok(EnsembleForecast {
        members: flat,
        k,
        init_time,
        lead,
        guidance_weight: config.guidance_weight,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Guidance sweep
// ---------------------------------------------------------------------------

/// One evaluation case for sweeps and scoring: a (possibly perturbed)
/// conditioning history, its phase, and the verifying truth target.
#[derive(Debug, Clone)]
pub struct ForecastCase {
    pub conditioning: Vec<f64>,
    pub phase: (f64, f64),
    pub truth: Vec<f64>,
    pub init_doy: usize,
    pub init_time: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepPoint {
    pub weight: f64,
    pub spread: f64,
    pub rmse: f64,
    pub crps: f64,
    pub spread_skill: f64,
}

/// Ensemble forecasts for every case at one guidance weight.
pub fn forecast_cases(
    params: &NetParams,
    cases: &[ForecastCase],
    sigma_spec: &SigmaSpec,
    config: &SamplerConfig,
    lead: LeadLabel,
    seed: u64,
) -> Result<Vec<EnsembleForecast>> {
    cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let den = GuidedStudent {
                params,
                conditioning: &case.conditioning,
                phase: case.phase,
                sigma_spec: *sigma_spec,
                weight: config.guidance_weight,
            };
            generate_ensemble(
                &den,
                config,
                case.init_time,
                lead,
                rng::derive_seed(seed, stream::SAMPLER, i as u64),
            )
        })
        .collect()
}

/// Spread / RMSE / CRPS / spread-skill for each guidance weight over an
/// evaluation set.
pub fn guidance_sweep(
    params: &NetParams,
    cases: &[ForecastCase],
    weights: &[f64],
    sigma_spec: &SigmaSpec,
    base_config: &SamplerConfig,
    lead: LeadLabel,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(weights.len());
    for &w in weights {
        let config = SamplerConfig { guidance_weight: w, ..*base_config };
        let forecasts = forecast_cases(params, cases, sigma_spec, &config, lead, seed)?;
        let pairs: Vec<(&EnsembleForecast, &[f64])> = forecasts
            .iter()
            .zip(cases.iter().map(|c| c.truth.as_slice()))
            .collect();
        let spread = crate::verify::ensemble_spread(&pairs)?;
        let rmse = crate::verify::ensemble_mean_rmse(&pairs)?;
        let crps = crate::verify::mean_crps(&pairs)?;
        let spread_skill = crate::verify::spread_skill_ratio(&pairs)?;
        out.push(SweepPoint { weight: w, spread, rmse, crps, spread_skill });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Forecast archive
// ---------------------------------------------------------------------------

pub const ARCHIVE_MAGIC: &[u8; 4] = b"LRF1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub init_time: f64,
    pub lead: LeadLabel,
    pub guidance_weight: f64,
    pub seed: u64,
    pub ensemble_size: usize,
    pub k: usize,
    /// Byte offset of this block in the data file.
    pub offset: u64,
}

/// Write forecasts as one binary block file plus a JSON index.
pub fn write_forecast_archive(dir: &Path, forecasts: &[EnsembleForecast]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut data = Vec::new();
    data.extend_from_slice(ARCHIVE_MAGIC);
    let mut entries = Vec::with_capacity(forecasts.len());
    for f in forecasts {
        entries.push(ArchiveEntry {
            init_time: f.init_time,
            lead: f.lead,
            guidance_weight: f.guidance_weight,
            seed: f.seed,
            ensemble_size: f.ensemble_size(),
            k: f.k,
            offset: data.len() as u64,
        });
        for v in &f.members {
            data.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut df = std::fs::File::create(dir.join("forecasts.lrf"))?;
    df.write_all(&data)?;
    std::fs::write(
        dir.join("index.json"),
        serde_json::to_vec_pretty(&entries)?,
    )?;
    Ok(())
}

pub fn read_forecast_archive(dir: &Path) -> Result<Vec<EnsembleForecast>> {
    let index_path = dir.join("index.json");
    if !index_path.exists() {
        return Err(Error::MissingInput(index_path.display().to_string()));
    }
    let entries: Vec<ArchiveEntry> = serde_json::from_slice(&std::fs::read(&index_path)?)?;
    let data = std::fs::read(dir.join("forecasts.lrf"))?;
    if data.len() < 4 || &data[0..4] != ARCHIVE_MAGIC {
        return Err(Error::Format {
            path: dir.join("forecasts.lrf").display().to_string(),
            reason: "missing LRF1 magic".to_string(),
        });
    }
    entries
        .iter()
        .map(|e| {
            let start = e.offset as usize;
            let len = e.ensemble_size * e.k * 4;
            if data.len() < start + len {
                return Err(Error::Format {
                    path: dir.join("forecasts.lrf").display().to_string(),
                    reason: "truncated block".to_string(),
                });
            }
            let members = data[start..start + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            Ok(EnsembleForecast {
                members,
                k: e.k,
                init_time: e.init_time,
                lead: e.lead,
                guidance_weight: e.guidance_weight,
                seed: e.seed,
            })
        })
        .collect()
}
