//! Training loop: seeded batch sampling, Adam updates, periodic
//! validation with fixed noise draws, best-checkpoint retention and
//! CSV learning curves. Fine-tuning reuses the same loop with most of
//! the parameter buffer frozen.

use super::adam::{AdamConfig, AdamState};
use super::edm::{edm_loss, per_sample_losses, SigmaSpec};
use super::net::{Arch, NetParams};
use crate::datagen::{Trajectory, DAYS_PER_YEAR};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::targets::{build_sample, LeadSpec, TrainingSample, CONDITIONING_FRAMES};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LRKP";

/// Samples addressable by a flat index over (member, anchor frame).
pub struct SamplePool {
    trajs: Vec<Trajectory>,
    spec: LeadSpec,
    save_window: usize,
    /// Cumulative anchor counts per trajectory.
    cumulative: Vec<usize>,
    /// First valid anchor per trajectory.
    first_anchor: usize,
    /// Day index of frame 0 per trajectory.
    day0: Vec<i64>,
}

impl SamplePool {
    /// `day_len` is the model time spanned by one day (steps-per-day x
    /// step_equiv); frames are assumed daily.
    pub fn new(
        trajs: Vec<Trajectory>,
        spec: LeadSpec,
        save_window: usize,
        day_len: f64,
    ) -> Result<Self> {
        spec.validate(save_window)?;
        if trajs.is_empty() {
            return Err(Error::InsufficientData { context: "SamplePool members", need: 1, have: 0 });
        }
        let first_anchor = CONDITIONING_FRAMES - 1;
        let margin = spec.frames_needed(save_window);
        let mut cumulative = Vec::with_capacity(trajs.len());
        let mut day0 = Vec::with_capacity(trajs.len());
        let mut total = 0usize;
        for t in &trajs {
            let n = t.num_frames();
            let count = if n > first_anchor + margin {
                n - margin - first_anchor
            } else {
                0
            };
            total += count;
            cumulative.push(total);
            day0.push((t.frame_times.first().copied().unwrap_or(0.0) / day_len).round() as i64);
        }
        if total == 0 {
            return Err(Error::InsufficientData {
                context: "SamplePool anchors",
                need: 1,
                have: 0,
            });
        }
        Ok(SamplePool { trajs, spec, save_window, cumulative, first_anchor, day0 })
    }

    pub fn len(&self) -> usize {
        *self.cumulative.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spec(&self) -> &LeadSpec {
        &self.spec
    }

    pub fn grid(&self) -> usize {
        self.trajs[0].k
    }

    fn locate(&self, global: usize) -> (usize, usize) {
        let ti = self.cumulative.partition_point(|c| *c <= global);
        let before = if ti == 0 { 0 } else { self.cumulative[ti - 1] };
        (ti, self.first_anchor + (global - before))
    }

    pub fn sample_at(&self, global: usize) -> Result<TrainingSample> {
        let (ti, n0) = self.locate(global);
        let traj = &self.trajs[ti];
        let day0 = self.day0[ti];
        build_sample(traj, n0, &self.spec, self.save_window, |frame| {
            ((day0 + frame as i64).rem_euclid(DAYS_PER_YEAR as i64)) as usize
        })
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Result<TrainingSample> {
        self.sample_at(rng.gen_range(0..self.len()))
    }

    /// Evenly spaced deterministic subset, at most `max` samples.
    pub fn fixed_subset(&self, max: usize) -> Result<Vec<TrainingSample>> {
        let total = self.len();
        let n = max.min(total).max(1);
        (0..n).map(|i| self.sample_at(i * total / n)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub sigma: SigmaSpec,
    pub adam: AdamConfig,
    pub seed: u64,
    pub val_every: usize,
    pub max_val_samples: usize,
    /// Learning curves appended here as `step,train_loss,val_loss`.
    pub curves_csv: Option<PathBuf>,
    /// Where to drop the best checkpoint if training diverges.
    pub checkpoint_on_divergence: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 64,
            lr: 1e-4,
            dropout: 0.1,
            sigma: SigmaSpec::default(),
            adam: AdamConfig::default(),
            seed: 0,
            val_every: 100,
            max_val_samples: 512,
            curves_csv: None,
            checkpoint_on_divergence: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct TrainResult {
    /// Parameters at the best validation loss.
    pub params: NetParams,
    pub final_params: NetParams,
    pub curves: Vec<CurvePoint>,
    pub best_val_loss: f64,
    pub best_step: usize,
    /// Per-sample validation losses at the best checkpoint.
    pub val_losses_at_best: Vec<f64>,
    pub adam: AdamState,
}

/// Generic training loop over a loss closure; `trainable`, when given,
/// freezes every parameter outside the listed ranges by zeroing its
/// gradient before the Adam update.
pub fn run_training<L>(
    init: NetParams,
    trainable: Option<Vec<Range<usize>>>,
    train_pool: &SamplePool,
    val_pool: &SamplePool,
    config: &TrainConfig,
    loss_grad: L,
    val_losses: &dyn Fn(&NetParams, &[TrainingSample]) -> Result<Vec<f64>>,
) -> Result<TrainResult>
where
    L: Fn(&NetParams, &[TrainingSample], &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)>,
{
    let mut params = init;
    let mut adam = AdamState::new(params.data.len(), config.adam);
    let val_set = val_pool.fixed_subset(config.max_val_samples)?;

    let frozen_mask: Option<Vec<bool>> = trainable.map(|ranges| {
        let mut frozen = vec![true; params.data.len()];
        for r in ranges {
            frozen[r].iter_mut().for_each(|f| *f = false);
        }
        frozen
    });

    let mut curves = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_step = 0usize;
    let mut best_params = params.clone();
    let mut window_loss_sum = 0.0;
    let mut window_count = 0usize;

    let eval_val = |p: &NetParams| -> Result<f64> {
        let v = val_losses(p, &val_set)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    };

    // Step 0 point: untrained validation loss with zero train loss slot.
    let v0 = eval_val(&params)?;
    if v0 < best_val {
        best_val = v0;
        best_params = params.clone();
    }
    curves.push(CurvePoint { step: 0, train_loss: f64::NAN, val_loss: v0 });

    for step in 1..=config.steps {
        let mut batch_rng = rng::stream_rng(config.seed, stream::TRAIN_BATCH, step as u64);
        let batch: Vec<TrainingSample> = (0..config.batch_size)
            .map(|_| train_pool.draw(&mut batch_rng))
            .collect::<Result<_>>()?;
        let (loss, mut grads) = loss_grad(&params, &batch, &mut batch_rng)?;
        if !loss.is_finite() {
            if let Some(path) = &config.checkpoint_on_divergence {
                save_checkpoint(path, &best_params, Some(&adam), best_step as u64, "diffusion")?;
            }
            return Err(Error::numeric(format!("training diverged at step {step}")));
        }
        if let Some(frozen) = &frozen_mask {
            for (g, f) in grads.iter_mut().zip(frozen) {
                if *f {
                    *g = 0.0;
                }
            }
        }
        adam.step(&mut params.data, &grads, config.lr)?;
        window_loss_sum += loss;
        window_count += 1;

        if step % config.val_every == 0 || step == config.steps {
            let val = eval_val(&params)?;
            let train_mean = window_loss_sum / window_count as f64;
            window_loss_sum = 0.0;
            window_count = 0;
            curves.push(CurvePoint { step, train_loss: train_mean, val_loss: val });
            if val < best_val {
                best_val = val;
                best_step = step;
                best_params = params.clone();
            }
        }
    }

    if let Some(path) = &config.curves_csv {
        append_curves_csv(path, &curves)?;
    }
    let val_losses_at_best = val_losses(&best_params, &val_set)?;
    Ok(TrainResult {
        params: best_params,
        final_params: params,
        curves,
        best_val_loss: best_val,
        best_step,
        val_losses_at_best,
        adam,
    })
}

/// Train the diffusion student from scratch.
pub fn train(
    arch: Arch,
    train_pool: &SamplePool,
    val_pool: &SamplePool,
    config: &TrainConfig,
) -> Result<TrainResult> {
    let init = NetParams::init(arch, config.seed, true)?;
    let sigma = config.sigma;
    let dropout = config.dropout;
    let seed = config.seed;
    run_training(
        init,
        None,
        train_pool,
        val_pool,
        config,
        move |p, batch, rng| edm_loss(p, batch, &sigma, dropout, rng),
        &move |p, batch| {
            let mut vrng = rng::stream_rng(seed, stream::VAL_DRAWS, 0);
            per_sample_losses(p, batch, &sigma, dropout, &mut vrng)
        },
    )
}

/// Fine-tune a pretrained student on a shifted-domain pool: only the
/// input projection, the output block and the normalization
/// scales/offsets move; everything else stays bitwise frozen.
pub fn finetune(
    pretrained: &NetParams,
    train_pool: &SamplePool,
    val_pool: &SamplePool,
    config: &TrainConfig,
) -> Result<TrainResult> {
    let trainable = pretrained.arch.layout().finetune_trainable();
    let sigma = config.sigma;
    let dropout = config.dropout;
    let seed = config.seed;
    run_training(
        pretrained.clone(),
        Some(trainable),
        train_pool,
        val_pool,
        config,
        move |p, batch, rng| edm_loss(p, batch, &sigma, dropout, rng),
        &move |p, batch| {
            let mut vrng = rng::stream_rng(seed, stream::VAL_DRAWS, 0);
            per_sample_losses(p, batch, &sigma, dropout, &mut vrng)
        },
    )
}

pub fn append_curves_csv(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    let new_file = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if new_file {
        writeln!(f, "step,train_loss,val_loss")?;
    }
    for c in curves {
        writeln!(f, "{},{},{}", c.step, c.train_loss, c.val_loss)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Arch,
    model_kind: String,
    step: u64,
    has_optimizer: bool,
    adam: AdamConfig,
    adam_t: u64,
}

pub struct Checkpoint {
    pub params: NetParams,
    pub optimizer: Option<AdamState>,
    pub step: u64,
    pub model_kind: String,
}

/// Versioned binary checkpoint; round-trips bit-exactly.
pub fn save_checkpoint(
    path: &Path,
    params: &NetParams,
    optimizer: Option<&AdamState>,
    step: u64,
    model_kind: &str,
) -> Result<()> {
    let header = CheckpointHeader {
        arch: params.arch,
        model_kind: model_kind.to_string(),
        step,
        has_optimizer: optimizer.is_some(),
        adam: optimizer.map(|o| o.config).unwrap_or_default(),
        adam_t: optimizer.map(|o| o.t).unwrap_or(0),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for v in &params.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(opt) = optimizer {
        for v in opt.m.iter().chain(opt.v.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingInput(path.display().to_string()));
    }
    let bytes = std::fs::read(path)?;
    let bad = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing LRKP magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != 1 {
        return Err(bad("unsupported checkpoint version"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + hlen])?;
    let total = header.arch.layout().total;
    let mut off = 12 + hlen;
    let take_f64s = |bytes: &[u8], off: &mut usize, n: usize| -> Result<Vec<f64>> {
        if bytes.len() < *off + n * 8 {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "truncated checkpoint".to_string(),
            });
        }
        let out = bytes[*off..*off + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *off += n * 8;
        Ok(out)
    };
    let data = take_f64s(&bytes, &mut off, total)?;
    let optimizer = if header.has_optimizer {
        let m = take_f64s(&bytes, &mut off, total)?;
        let v = take_f64s(&bytes, &mut off, total)?;
        Some(AdamState { m, v, t: header.adam_t, config: header.adam })
    } else {
        None
    };
    Ok(Checkpoint {
        params: NetParams { arch: header.arch, data },
        optimizer,
        step: header.step,
        model_kind: header.model_kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chaotic_pool(members: usize, days: usize, seed: u64, spec: LeadSpec) -> SamplePool {
        let params = crate::dynsys::SystemParams { k: 8, j: 1, dt: 0.01, ..Default::default() };
        let config = crate::datagen::GenerationConfig {
            num_members: members,
            seed,
            duration_years: days as f64 / DAYS_PER_YEAR as f64,
            spinup_years: 0.0,
            ..Default::default()
        };
        let trajs = crate::datagen::generate_ensemble_members(&config, &params).unwrap();
        SamplePool::new(trajs, spec, 4, 0.2).unwrap()
    }

    #[test]
    fn pool_indexing_covers_all_anchors() {
        let spec = LeadSpec::medium_range();
        let pool = chaotic_pool(2, 30, 1, spec);
        // 30 frames, margin 8 (day-7 frame), first anchor 3.
        assert_eq!(pool.len(), 2 * (30 - 8 - 3));
        for i in [0, 1, pool.len() - 1] {
            let s = pool.sample_at(i).unwrap();
            assert_eq!(s.conditioning.len(), 4 * 8);
            assert_eq!(s.target.len(), 8);
        }
    }

    #[test]
    fn fixed_subset_is_deterministic() {
        let spec = LeadSpec::medium_range();
        let pool = chaotic_pool(2, 40, 2, spec);
        let a = pool.fixed_subset(10).unwrap();
        let b = pool.fixed_subset(10).unwrap();
        assert_eq!(a.len(), 10);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.target, y.target);
            assert_eq!(x.init_frame, y.init_frame);
        }
    }

    #[test]
    fn short_training_run_decreases_loss_and_is_seeded() {
        let spec = LeadSpec::medium_range();
        let train_pool = chaotic_pool(3, 60, 3, spec);
        let val_pool = chaotic_pool(1, 40, 4, spec);
        let arch = Arch::student(8, 8, 2, 3);
        let config = TrainConfig {
            steps: 30,
            batch_size: 8,
            lr: 1e-3,
            val_every: 10,
            max_val_samples: 16,
            seed: 5,
            ..Default::default()
        };
        let r1 = train(arch, &train_pool, &val_pool, &config).unwrap();
        let r2 = train(arch, &train_pool, &val_pool, &config).unwrap();
        assert_eq!(r1.final_params.data, r2.final_params.data);
        assert!(r1.curves.last().unwrap().val_loss.is_finite());

        // A different seed gives different parameters but still finite
        // decreasing-ish loss.
        let config2 = TrainConfig { seed: 6, ..config };
        let r3 = train(arch, &train_pool, &val_pool, &config2).unwrap();
        assert_ne!(r1.final_params.data, r3.final_params.data);
        assert!(r3.curves.iter().all(|c| c.val_loss.is_finite()));
    }

    #[test]
    fn finetune_zero_steps_keeps_params() {
        let spec = LeadSpec::medium_range();
        let pool = chaotic_pool(2, 40, 7, spec);
        let arch = Arch::student(8, 8, 2, 3);
        let pre = NetParams::init(arch, 9, false).unwrap();
        let config = TrainConfig {
            steps: 0,
            batch_size: 4,
            max_val_samples: 8,
            seed: 9,
            ..Default::default()
        };
        let r = finetune(&pre, &pool, &pool, &config).unwrap();
        assert_eq!(r.final_params.data, pre.data);
    }

    #[test]
    fn finetune_freezes_everything_but_the_trainable_subset() {
        let spec = LeadSpec::medium_range();
        let pool = chaotic_pool(2, 40, 8, spec);
        let arch = Arch::student(8, 8, 2, 3);
        let pre = NetParams::init(arch, 10, false).unwrap();
        let config = TrainConfig {
            steps: 12,
            batch_size: 8,
            lr: 1e-3,
            val_every: 6,
            max_val_samples: 8,
            seed: 11,
            ..Default::default()
        };
        let r = finetune(&pre, &pool, &pool, &config).unwrap();
        let layout = arch.layout();
        let trainable = layout.finetune_trainable();
        let is_trainable =
            |i: usize| trainable.iter().any(|range| range.contains(&i));
        let mut changed_trainable = false;
        for i in 0..pre.data.len() {
            if is_trainable(i) {
                changed_trainable |= r.final_params.data[i] != pre.data[i];
            } else {
                assert_eq!(
                    r.final_params.data[i], pre.data[i],
                    "frozen parameter {i} moved"
                );
            }
        }
        assert!(changed_trainable);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let arch = Arch::student(8, 8, 2, 3);
        let params = NetParams::init(arch, 12, false).unwrap();
        let mut adam = AdamState::new(params.data.len(), AdamConfig::default());
        let grads: Vec<f64> = (0..params.data.len()).map(|i| (i as f64 * 0.1).sin()).collect();
        let mut p2 = params.clone();
        adam.step(&mut p2.data, &grads, 1e-3).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lrkp");
        save_checkpoint(&path, &p2, Some(&adam), 17, "diffusion").unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.data, p2.data);
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.model_kind, "diffusion");
        let opt = loaded.optimizer.unwrap();
        assert_eq!(opt.m, adam.m);
        assert_eq!(opt.v, adam.v);
        assert_eq!(opt.t, adam.t);

        // Second save of the loaded checkpoint is byte-identical.
        let path2 = dir.path().join("model2.lrkp");
        save_checkpoint(&path2, &loaded.params, Some(&opt), 17, "diffusion").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn curves_csv_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        let pts = vec![CurvePoint { step: 0, train_loss: 1.0, val_loss: 2.0 }];
        append_curves_csv(&path, &pts).unwrap();
        append_curves_csv(&path, &pts).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("step,train_loss,val_loss"));
    }
}
