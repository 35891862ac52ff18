//! Quintile-classification baseline.
//!
//! The same ring backbone as the diffusion student, with the noise
//! channel and noise-level embedding removed and a 5-way softmax head,
//! trained with cross entropy to classify which climatological quintile
//! bin the long-range target falls in. Scored with the ranked
//! probability score over the ordered bins.

use crate::datagen::DAYS_PER_YEAR;
use crate::error::{Error, Result};
use crate::student::net::{backward, forward, forward_cached, NetParams};
use crate::targets::{LeadClimatology, TrainingSample, CONDITIONING_FRAMES};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const NUM_BINS: usize = 5;

/// Per-(day-of-year, gridpoint) quintile edges of the climatological
/// target distribution: 4 strictly increasing values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuintileEdges {
    pub k: usize,
    /// [360 x K x 4]
    pub edges: Vec<f64>,
}

impl QuintileEdges {
    pub fn at(&self, doy: usize, gridpoint: usize) -> &[f64] {
        let base = (doy * self.k + gridpoint) * (NUM_BINS - 1);
        &self.edges[base..base + NUM_BINS - 1]
    }

    /// Bin index of a value: 0 for v <= e0, 4 for v > e3.
    pub fn bin_of(&self, doy: usize, gridpoint: usize, value: f64) -> usize {
        let edges = self.at(doy, gridpoint);
        edges.iter().position(|e| value <= *e).unwrap_or(NUM_BINS - 1)
    }
}

/// Linear-interpolation percentile edges (20/40/60/80) of a value set.
pub fn quintile_edges_from_values(values: &[f64]) -> Result<[f64; 4]> {
    if values.len() < 20 {
        return Err(Error::InsufficientData {
            context: "quintile reference values",
            need: 20,
            have: values.len(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut edges = [0.0; 4];
    for (i, q) in [0.2, 0.4, 0.6, 0.8].iter().enumerate() {
        edges[i] = crate::verify::quantile_sorted(&sorted, *q);
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::numeric(
            "degenerate quintile edges (reference values too repetitive)",
        ));
    }
    Ok(edges)
}

/// Fit edges from the probabilistic target climatology (one value per
/// reference year at each day-of-year and gridpoint).
pub fn fit_quintiles(clim: &LeadClimatology) -> Result<QuintileEdges> {
    let k = clim.k;
    let mut edges = Vec::with_capacity(DAYS_PER_YEAR * k * (NUM_BINS - 1));
    for doy in 0..DAYS_PER_YEAR {
        for g in 0..k {
            let values = clim.ensemble_at(doy, g);
            let e = quintile_edges_from_values(&values)?;
            edges.extend_from_slice(&e);
        }
    }
    Ok(QuintileEdges { k, edges })
}

/// Network inputs for the classifier: conditioning channels plus the
/// seasonal phase embedding.
fn qr_inputs(sample_cond: &[f64], phase: (f64, f64)) -> (Vec<f64>, Vec<f64>) {
    (sample_cond.to_vec(), vec![phase.0, phase.1])
}

/// Class probabilities `[5 x K]`, softmax over bins per gridpoint.
pub fn qr_forward(params: &NetParams, conditioning: &[f64], phase: (f64, f64)) -> Result<Vec<f64>> {
    let k = params.arch.grid;
    if conditioning.len() != CONDITIONING_FRAMES * k {
        return Err(Error::ShapeMismatch {
            context: "qr_forward conditioning",
            expected: CONDITIONING_FRAMES * k,
            actual: conditioning.len(),
        });
    }
    let (channels, emb) = qr_inputs(conditioning, phase);
    let logits = forward(params, &channels, &emb);
    Ok(softmax_bins(&logits, k))
}

fn softmax_bins(logits: &[f64], k: usize) -> Vec<f64> {
    let mut probs = vec![0.0; NUM_BINS * k];
    for g in 0..k {
        let mut max = f64::NEG_INFINITY;
        for c in 0..NUM_BINS {
            max = max.max(logits[c * k + g]);
        }
        let mut z = 0.0;
        for c in 0..NUM_BINS {
            let e = (logits[c * k + g] - max).exp();
            probs[c * k + g] = e;
            z += e;
        }
        for c in 0..NUM_BINS {
            probs[c * k + g] /= z;
        }
    }
    probs
}

fn labels_for(sample: &TrainingSample, edges: &QuintileEdges) -> Vec<usize> {
    (0..sample.target.len())
        .map(|g| edges.bin_of(sample.init_doy, g, sample.target[g]))
        .collect()
}

/// Mean cross entropy over a batch plus parameter gradients.
pub fn qr_loss(
    params: &NetParams,
    batch: &[TrainingSample],
    edges: &QuintileEdges,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData { context: "qr_loss batch", need: 1, have: 0 });
    }
    let k = params.arch.grid;
    const CHUNK: usize = 8;
    let partials: Vec<Result<(f64, Vec<f64>)>> = batch
        .chunks(CHUNK)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|chunk| {
            let mut grad = vec![0.0; params.data.len()];
            let mut loss_sum = 0.0;
            for sample in chunk.iter() {
                let (channels, emb) = qr_inputs(&sample.conditioning, sample.phase);
                let (logits, cache) = forward_cached(params, &channels, &emb);
                let probs = softmax_bins(&logits, k);
                let labels = labels_for(sample, edges);
                let mut dlogits = vec![0.0; NUM_BINS * k];
                let inv_k = 1.0 / k as f64;
                for g in 0..k {
                    let p = probs[labels[g] * k + g].max(1e-300);
                    loss_sum -= p.ln() * inv_k;
                    for c in 0..NUM_BINS {
                        let onehot = if c == labels[g] { 1.0 } else { 0.0 };
                        dlogits[c * k + g] = (probs[c * k + g] - onehot) * inv_k;
                    }
                }
                backward(params, &cache, &dlogits, &mut grad);
            }
            Ok((loss_sum, grad))
        })
        .collect();

    let mut total = 0.0;
    let mut grad = vec![0.0; params.data.len()];
    for p in partials {
        let (l, g) = p?;
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let inv_n = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv_n);
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite cross entropy"));
    }
    Ok((loss, grad))
}

/// Per-sample cross entropies (validation path).
pub fn qr_per_sample_losses(
    params: &NetParams,
    batch: &[TrainingSample],
    edges: &QuintileEdges,
) -> Result<Vec<f64>> {
    batch
        .par_iter()
        .map(|sample| {
            let probs = qr_forward(params, &sample.conditioning, sample.phase)?;
            let labels = labels_for(sample, edges);
            let k = sample.target.len();
            let mut loss = 0.0;
            for g in 0..k {
                loss -= probs[labels[g] * k + g].max(1e-300).ln();
            }
            Ok(loss / k as f64)
        })
        .collect()
}

/// Ranked probability score of a 5-bin probability forecast against an
/// observed bin: sum over the 4 cumulative thresholds of the squared
/// CDF difference.
pub fn rps(probs: &[f64; NUM_BINS], observed_bin: usize) -> f64 {
    let mut cum_f = 0.0;
    let mut cum_o = 0.0;
    let mut score = 0.0;
    for c in 0..NUM_BINS - 1 {
        cum_f += probs[c];
        cum_o += if c == observed_bin { 1.0 } else { 0.0 };
        score += (cum_f - cum_o) * (cum_f - cum_o);
    }
    score
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QrEvaluation {
    /// Mean RPS of the model forecast.
    pub model_rps: f64,
    /// Mean RPS of the uniform (climatological) forecast on the same
    /// outcomes.
    pub uniform_rps: f64,
    pub cases: usize,
}

/// Evaluate mean RPS against the climatological uniform baseline.
pub fn qr_evaluate(
    params: &NetParams,
    eval_set: &[TrainingSample],
    edges: &QuintileEdges,
) -> Result<QrEvaluation> {
    if eval_set.is_empty() {
        return Err(Error::InsufficientData { context: "qr_evaluate set", need: 1, have: 0 });
    }
    let k = params.arch.grid;
    let uniform = [0.2; NUM_BINS];
    let scores: Vec<Result<(f64, f64)>> = eval_set
        .par_iter()
        .map(|sample| {
            let probs = qr_forward(params, &sample.conditioning, sample.phase)?;
            let labels = labels_for(sample, edges);
            let mut model = 0.0;
            let mut unif = 0.0;
            for g in 0..k {
                let mut p = [0.0; NUM_BINS];
                for c in 0..NUM_BINS {
                    p[c] = probs[c * k + g];
                }
                model += rps(&p, labels[g]);
                unif += rps(&uniform, labels[g]);
            }
            Ok((model / k as f64, unif / k as f64))
        })
        .collect();
    let mut model_sum = 0.0;
    let mut unif_sum = 0.0;
    for s in scores {
        let (m, u) = s?;
        model_sum += m;
        unif_sum += u;
    }
    let n = eval_set.len() as f64;
    Ok(QrEvaluation {
        model_rps: model_sum / n,
        uniform_rps: unif_sum / n,
        cases: eval_set.len(),
    })
}
