//! EDM preconditioning and denoising loss.
//!
//! The denoiser wraps the raw network as
//! `D(x, sigma) = c_skip * x + c_out * net(c_in * x, c_noise, cond)` with
//! the standard sigma-dependent scalars, trains on noise levels drawn
//! log-uniformly from `[sigma_min, sigma_max]`, and weights the squared
//! error by `lambda(sigma) = (sigma^2 + sigma_d^2) / (sigma * sigma_d)^2`
//! so every noise level contributes at unit scale.

use super::net::{backward, forward, forward_cached, NetParams};
use crate::error::{Error, Result};
use crate::targets::{TrainingSample, CONDITIONING_FRAMES};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Noise-level range and data scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSpec {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Data scale; 1 after corpus standardization.
    pub sigma_data: f64,
}

impl Default for SigmaSpec {
    fn default() -> Self {
        SigmaSpec { sigma_min: 0.002, sigma_max: 200.0, sigma_data: 1.0 }
    }
}

impl SigmaSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.sigma_min && self.sigma_min < self.sigma_max) {
            return Err(Error::config(format!(
                "sigma range must satisfy 0 < min < max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }
}

/// The four preconditioning scalars for a noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precondition {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precondition(sigma: f64, spec: &SigmaSpec) -> Result<Precondition> {
    if !(sigma > 0.0) {
        return Err(Error::numeric(format!("sigma must be positive, got {sigma}")));
    }
    let sd2 = spec.sigma_data * spec.sigma_data;
    let s2 = sigma * sigma;
    let denom = s2 + sd2;
    Ok(Precondition {
        c_skip: sd2 / denom,
        c_out: sigma * spec.sigma_data / denom.sqrt(),
        c_in: 1.0 / denom.sqrt(),
        c_noise: sigma.ln() / 4.0,
    })
}

/// Loss weight `lambda(sigma)`; satisfies `lambda * c_out^2 = 1`.
pub fn loss_weight(sigma: f64, spec: &SigmaSpec) -> f64 {
    let sd = spec.sigma_data;
    (sigma * sigma + sd * sd) / (sigma * sd * (sigma * sd))
}

/// Log-uniform noise level: `exp(U(ln sigma_min, ln sigma_max))`.
pub fn sample_sigma<R: Rng>(rng: &mut R, spec: &SigmaSpec) -> f64 {
    let lo = spec.sigma_min.ln();
    let hi = spec.sigma_max.ln();
    (lo + (hi - lo) * rng.gen::<f64>()).exp()
}

/// Assemble network inputs for the student: channel 0 is the `c_in`-scaled
/// noised field, channels 1..=4 the conditioning history (zeroed when the
/// condition is dropped); the embedding carries `(c_noise, sin, cos)` —
/// the seasonal phase stays even for dropped conditions.
pub fn student_inputs(
    x_noised: &[f64],
    pre: &Precondition,
    conditioning: &[f64],
    phase: (f64, f64),
    cond_dropped: bool,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut channels = Vec::with_capacity((1 + CONDITIONING_FRAMES) * k);
    channels.extend(x_noised.iter().map(|v| pre.c_in * v));
    if cond_dropped {
        channels.extend(std::iter::repeat(0.0).take(CONDITIONING_FRAMES * k));
    } else {
        channels.extend_from_slice(conditioning);
    }
    let emb = vec![pre.c_noise, phase.0, phase.1];
    (channels, emb)
}

/// Denoised estimate `D(x_noised, sigma | cond, phase)`.
pub fn student_forward(
    params: &NetParams,
    x_noised: &[f64],
    sigma: f64,
    conditioning: &[f64],
    phase: (f64, f64),
    cond_dropped: bool,
    spec: &SigmaSpec,
) -> Result<Vec<f64>> {
    let k = params.arch.grid;
    if x_noised.len() != k {
        return Err(Error::ShapeMismatch {
            context: "student_forward state",
            expected: k,
            actual: x_noised.len(),
        });
    }
    if conditioning.len() != CONDITIONING_FRAMES * k {
        return Err(Error::ShapeMismatch {
            context: "student_forward conditioning",
            expected: CONDITIONING_FRAMES * k,
            actual: conditioning.len(),
        });
    }
    let pre = precondition(sigma, spec)?;
    let (channels, emb) = student_inputs(x_noised, &pre, conditioning, phase, cond_dropped, k);
    let net_out = forward(params, &channels, &emb);
    Ok(x_noised
        .iter()
        .zip(&net_out)
        .map(|(x, f)| pre.c_skip * x + pre.c_out * f)
        .collect())
}

/// Per-sample draws made before network evaluation so that two calls
/// with identically seeded rngs see identical noise.
struct SampleDraws {
    sigma: f64,
    noise: Vec<f64>,
    dropped: bool,
}

fn draw_for_sample<R: Rng>(rng: &mut R, k: usize, spec: &SigmaSpec, dropout: f64) -> SampleDraws {
    let sigma = sample_sigma(rng, spec);
    let noise: Vec<f64> = (0..k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect();
    let dropped = rng.gen::<f64>() < dropout;
    SampleDraws { sigma, noise, dropped }
}

/// Loss and gradient contribution of one sample.
fn sample_loss_grad(
    params: &NetParams,
    sample: &TrainingSample,
    draws: &SampleDraws,
    spec: &SigmaSpec,
    grad: &mut [f64],
) -> Result<f64> {
    let k = params.arch.grid;
    let pre = precondition(draws.sigma, spec)?;
    let x_noised: Vec<f64> = sample
        .target
        .iter()
        .zip(&draws.noise)
        .map(|(t, n)| t + n)
        .collect();
    let (channels, emb) = student_inputs(
        &x_noised,
        &pre,
        &sample.conditioning,
        sample.phase,
        draws.dropped,
        k,
    );
    let (net_out, cache) = forward_cached(params, &channels, &emb);
    let lambda = loss_weight(draws.sigma, spec);
    let mut loss = 0.0;
    let mut dnet = vec![0.0; k];
    let inv_k = 1.0 / k as f64;
    for i in 0..k {
        let d = pre.c_skip * x_noised[i] + pre.c_out * net_out[i];
        let err = d - sample.target[i];
        loss += lambda * err * err * inv_k;
        dnet[i] = lambda * 2.0 * inv_k * err * pre.c_out;
    }
    backward(params, &cache, &dnet, grad);
    Ok(loss)
}

/// Mean EDM loss over a batch plus parameter gradients. Noise levels,
/// noise fields and condition dropout are drawn from `rng` per sample in
/// batch order before any network work, so reruns with an identically
/// seeded rng reproduce the loss bit for bit. Batch members are chunked
/// in fixed order for deterministic parallel reduction.
pub fn edm_loss(
    params: &NetParams,
    batch: &[TrainingSample],
    spec: &SigmaSpec,
    dropout: f64,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData { context: "edm_loss batch", need: 1, have: 0 });
    }
    spec.validate()?;
    let k = params.arch.grid;
    let draws: Vec<SampleDraws> = batch
        .iter()
        .map(|_| draw_for_sample(rng, k, spec, dropout))
        .collect();

    const CHUNK: usize = 8;
    let jobs: Vec<(usize, &[TrainingSample], &[SampleDraws])> = batch
        .chunks(CHUNK)
        .zip(draws.chunks(CHUNK))
        .enumerate()
        .map(|(i, (s, d))| (i, s, d))
        .collect();
    let partials: Vec<Result<(f64, Vec<f64>)>> = jobs
        .par_iter()
        .map(|(ci, samples, chunk_draws)| {
            let mut grad = vec![0.0; params.data.len()];
            let mut loss_sum = 0.0;
            for (si, (sample, d)) in samples.iter().zip(chunk_draws.iter()).enumerate() {
                let l = sample_loss_grad(params, sample, d, spec, &mut grad)?;
                if !l.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite loss at batch sample {}",
                        ci * CHUNK + si
                    )));
                }
                loss_sum += l;
            }
            Ok((loss_sum, grad))
        })
        .collect();

    let mut total_loss = 0.0;
    let mut grad = vec![0.0; params.data.len()];
    for partial in partials {
        let (l, g) = partial?;
        total_loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let inv_n = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv_n);
    Ok((total_loss * inv_n, grad))
}

/// Loss only (validation); same draw protocol as [`edm_loss`].
pub fn edm_loss_only(
    params: &NetParams,
    batch: &[TrainingSample],
    spec: &SigmaSpec,
    dropout: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    Ok(per_sample_losses(params, batch, spec, dropout, rng)?
        .iter()
        .sum::<f64>()
        / batch.len().max(1) as f64)
}

/// Per-sample losses (used for bootstrap intervals over the val set).
pub fn per_sample_losses(
    params: &NetParams,
    batch: &[TrainingSample],
    spec: &SigmaSpec,
    dropout: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::InsufficientData {
            context: "per_sample_losses batch",
            need: 1,
            have: 0,
        });
    }
    let k = params.arch.grid;
    let draws: Vec<SampleDraws> = batch
        .iter()
        .map(|_| draw_for_sample(rng, k, spec, dropout))
        .collect();
    let losses: Vec<Result<f64>> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(sample, d)| {
            let pre = precondition(d.sigma, spec)?;
            let x_noised: Vec<f64> = sample
                .target
                .iter()
                .zip(&d.noise)
                .map(|(t, n)| t + n)
                .collect();
            let (channels, emb) = student_inputs(
                &x_noised,
                &pre,
                &sample.conditioning,
                sample.phase,
                d.dropped,
                k,
            );
            let net_out = forward(params, &channels, &emb);
            let lambda = loss_weight(d.sigma, spec);
            let mut loss = 0.0;
            for i in 0..k {
                let dv = pre.c_skip * x_noised[i] + pre.c_out * net_out[i];
                let err = dv - sample.target[i];
                loss += lambda * err * err;
            }
            Ok(loss / k as f64)
        })
        .collect();
    losses.into_iter().collect()
}
