//! Long-range targets, conditioning histories and climatologies.
//!
//! A trajectory frame `d` averages the `W = save_window` teacher steps
//! `[W*d, W*(d+1))`, so its teacher-step center is `W*d + (W-1)/2`. The
//! long-range target for lead `N` and window `M` (both in teacher steps,
//! relative to the start of the initialization frame `n0`) is the mean
//! of the `M/W` frames whose centers fall in `[N - M/2, N + M/2)` — an
//! exactly `M`-step window, which reproduces the day-7 / days-25..31 /
//! days-70..97 target tables at the daily cadence.

use crate::datagen::{Trajectory, DAYS_PER_YEAR};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Number of daily frames in the conditioning history.
pub const CONDITIONING_FRAMES: usize = 4;

pub const CLIMATOLOGY_MAGIC: &[u8; 4] = b"LRC1";

/// Forecast regime labels used for model selection and file naming.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeadLabel {
    Medium,
    S2s,
    Seasonal,
}

impl LeadLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            LeadLabel::Medium => "medium",
            LeadLabel::S2s => "s2s",
            LeadLabel::Seasonal => "seasonal",
        }
    }
}

impl std::str::FromStr for LeadLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medium" => Ok(LeadLabel::Medium),
            "s2s" => Ok(LeadLabel::S2s),
            "seasonal" => Ok(LeadLabel::Seasonal),
            other => Err(Error::config(format!("unknown lead label {other:?}"))),
        }
    }
}

/// Lead time `N` and averaging window `M`, both in teacher steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadSpec {
    pub n: usize,
    pub m: usize,
    pub label: LeadLabel,
}

impl LeadSpec {
    pub fn medium_range() -> Self {
        LeadSpec { n: 28, m: 4, label: LeadLabel::Medium }
    }

    pub fn s2s() -> Self {
        LeadSpec { n: 112, m: 28, label: LeadLabel::S2s }
    }

    pub fn seasonal() -> Self {
        LeadSpec { n: 336, m: 112, label: LeadLabel::Seasonal }
    }

    pub fn for_label(label: LeadLabel) -> Self {
        match label {
            LeadLabel::Medium => Self::medium_range(),
            LeadLabel::S2s => Self::s2s(),
            LeadLabel::Seasonal => Self::seasonal(),
        }
    }

    pub fn validate(&self, save_window: usize) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::config("lead spec requires N > 0 and M >= 1"));
        }
        if self.m % save_window != 0 {
            return Err(Error::config(format!(
                "M ({}) must be a multiple of save_window ({save_window})",
                self.m
            )));
        }
        if self.n as f64 - self.m as f64 / 2.0 <= 0.0 {
            return Err(Error::config("lead spec requires N - M/2 > 0"));
        }
        Ok(())
    }

    /// Frame offsets relative to `n0` whose centers fall in the target
    /// window `[N - M/2, N + M/2)`.
    pub fn target_frame_offsets(&self, save_window: usize) -> Vec<usize> {
        let w = save_window as f64;
        let half = self.m as f64 / 2.0;
        let lo = self.n as f64 - half;
        let hi = self.n as f64 + half;
        let count = self.m / save_window;
        let mut offsets = Vec::with_capacity(count);
        let mut d = (lo / w).floor().max(0.0) as usize;
        loop {
            let center = w * d as f64 + (w - 1.0) / 2.0;
            if center >= hi {
                break;
            }
            if center >= lo {
                offsets.push(d);
            }
            d += 1;
        }
        debug_assert_eq!(offsets.len(), count);
        offsets
    }

    /// Trailing margin in frames required after `n0`.
    pub fn frames_needed(&self, save_window: usize) -> usize {
        self.target_frame_offsets(save_window)
            .last()
            .map(|d| d + 1)
            .unwrap_or(0)
    }
}

/// One supervised example: 4-frame history, seasonal phase, averaged target.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// Conditioning frames, newest first (day offsets 0, -1, -2, -3),
    /// flattened [CONDITIONING_FRAMES x K].
    pub conditioning: Vec<f64>,
    /// (sin, cos) of 2 pi doy / 360 at day 0.
    pub phase: (f64, f64),
    /// Target frame, length K.
    pub target: Vec<f64>,
    /// Day-of-year of day 0.
    pub init_doy: usize,
    /// Day-of-year of each frame in the target window.
    pub target_doys: Vec<usize>,
    pub member_id: usize,
    pub init_frame: usize,
}

pub fn phase_of_doy(doy: usize) -> (f64, f64) {
    let a = 2.0 * std::f64::consts::PI * doy as f64 / DAYS_PER_YEAR as f64;
    (a.sin(), a.cos())
}

/// Mean of the target-window frames at lead `spec` from frame `n0`.
pub fn build_target(
    traj: &Trajectory,
    n0: usize,
    spec: &LeadSpec,
    save_window: usize,
) -> Result<Vec<f64>> {
    let offsets = spec.target_frame_offsets(save_window);
    let last = n0 + offsets.last().copied().unwrap_or(0);
    if last >= traj.num_frames() {
        return Err(Error::InsufficientData {
            context: "build_target window",
            need: last + 1,
            have: traj.num_frames(),
        });
    }
    let k = traj.k;
    let mut acc = vec![0.0; k];
    for off in &offsets {
        for (a, v) in acc.iter_mut().zip(traj.frame(n0 + off)) {
            *a += v;
        }
    }
    let inv = 1.0 / offsets.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

/// Conditioning frames for day offsets {0, -1, -2, -3} plus the phase of
/// day 0. The frames are stored newest first.
pub fn build_conditioning(
    traj: &Trajectory,
    n0: usize,
    init_doy: usize,
) -> Result<(Vec<f64>, (f64, f64))> {
    if n0 + 1 < CONDITIONING_FRAMES {
        return Err(Error::InsufficientData {
            context: "build_conditioning history",
            need: CONDITIONING_FRAMES,
            have: n0 + 1,
        });
    }
    let k = traj.k;
    let mut cond = Vec::with_capacity(CONDITIONING_FRAMES * k);
    for back in 0..CONDITIONING_FRAMES {
        cond.extend_from_slice(traj.frame(n0 - back));
    }
    Ok((cond, phase_of_doy(init_doy)))
}

/// Build one full training sample anchored at frame `n0`.
pub fn build_sample(
    traj: &Trajectory,
    n0: usize,
    spec: &LeadSpec,
    save_window: usize,
    doy_of_frame: impl Fn(usize) -> usize,
) -> Result<TrainingSample> {
    let init_doy = doy_of_frame(n0);
    let (conditioning, phase) = build_conditioning(traj, n0, init_doy)?;
    let target = build_target(traj, n0, spec, save_window)?;
    let target_doys = spec
        .target_frame_offsets(save_window)
        .iter()
        .map(|off| doy_of_frame(n0 + off))
        .collect();
    Ok(TrainingSample {
        conditioning,
        phase,
        target,
        init_doy,
        target_doys,
        member_id: traj.member_id,
        init_frame: n0,
    })
}

// ---------------------------------------------------------------------------
// Climatologies
// ---------------------------------------------------------------------------

/// Per-day-of-year climatology of lead-`spec` targets over a reference
/// window: the per-year targets kept as an ensemble (probabilistic) and
/// their mean (deterministic).
#[derive(Debug, Clone)]
pub struct LeadClimatology {
    pub k: usize,
    pub window_years: usize,
    /// [360 x K]
    pub det: Vec<f64>,
    /// [360 x window_years x K]
    pub prob: Vec<f64>,
}

impl LeadClimatology {
    pub fn deterministic(&self, doy: usize) -> &[f64] {
        &self.det[doy * self.k..(doy + 1) * self.k]
    }

    /// Ensemble member `y` of the probabilistic climatology at `doy`.
    pub fn member(&self, doy: usize, y: usize) -> &[f64] {
        let base = (doy * self.window_years + y) * self.k;
        &self.prob[base..base + self.k]
    }

    /// Ensemble values for one gridpoint at `doy`.
    pub fn ensemble_at(&self, doy: usize, gridpoint: usize) -> Vec<f64> {
        (0..self.window_years)
            .map(|y| self.member(doy, y)[gridpoint])
            .collect()
    }
}

/// Compute lead-target climatology from a reference trajectory. Year `y`,
/// day-of-year `d` contributes the target anchored at frame `y*360 + d`
/// (plus the trajectory's day offset). The reference period must supply
/// `window_years` complete years plus the lead margin.
pub fn compute_climatology(
    reference: &Trajectory,
    spec: &LeadSpec,
    save_window: usize,
    window_years: usize,
    doy_of_frame: impl Fn(usize) -> usize,
) -> Result<LeadClimatology> {
    let k = reference.k;
    let margin = spec.frames_needed(save_window);
    let frames_needed = window_years * DAYS_PER_YEAR + margin;
    if reference.num_frames() < frames_needed {
        return Err(Error::InsufficientData {
            context: "compute_climatology reference years",
            need: frames_needed,
            have: reference.num_frames(),
        });
    }
    // Align year boundaries with day-of-year zero of the reference.
    let first_doy = doy_of_frame(0);
    let start = if first_doy == 0 { 0 } else { DAYS_PER_YEAR - first_doy };
    if reference.num_frames() < start + frames_needed {
        return Err(Error::InsufficientData {
            context: "compute_climatology aligned reference years",
            need: start + frames_needed,
            have: reference.num_frames(),
        });
    }

    let mut det = vec![0.0; DAYS_PER_YEAR * k];
    let mut prob = vec![0.0; DAYS_PER_YEAR * window_years * k];
    for doy in 0..DAYS_PER_YEAR {
        for y in 0..window_years {
            let n0 = start + y * DAYS_PER_YEAR + doy;
            let target = build_target(reference, n0, spec, save_window)?;
            let base = (doy * window_years + y) * k;
            prob[base..base + k].copy_from_slice(&target);
            for (d, v) in det[doy * k..(doy + 1) * k].iter_mut().zip(&target) {
                *d += v;
            }
        }
        let inv = 1.0 / window_years as f64;
        det[doy * k..(doy + 1) * k].iter_mut().for_each(|d| *d *= inv);
    }
    Ok(LeadClimatology { k, window_years, det, prob })
}

/// Per-day-of-year mean daily frame; the currency of the domain-shift
/// correction.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyClimatology {
    pub k: usize,
    /// [360 x K]
    pub mean: Vec<f64>,
}

impl DailyClimatology {
    pub fn at(&self, doy: usize) -> &[f64] {
        &self.mean[doy * self.k..(doy + 1) * self.k]
    }
}

pub fn compute_daily_climatology(
    reference: &Trajectory,
    window_years: usize,
    doy_of_frame: impl Fn(usize) -> usize,
) -> Result<DailyClimatology> {
    let k = reference.k;
    let first_doy = doy_of_frame(0);
    let start = if first_doy == 0 { 0 } else { DAYS_PER_YEAR - first_doy };
    let need = start + window_years * DAYS_PER_YEAR;
    if reference.num_frames() < need {
        return Err(Error::InsufficientData {
            context: "compute_daily_climatology reference years",
            need,
            have: reference.num_frames(),
        });
    }
    let mut mean = vec![0.0; DAYS_PER_YEAR * k];
    for doy in 0..DAYS_PER_YEAR {
        for y in 0..window_years {
            let frame = reference.frame(start + y * DAYS_PER_YEAR + doy);
            for (m, v) in mean[doy * k..(doy + 1) * k].iter_mut().zip(frame) {
                *m += v;
            }
        }
    }
    let inv = 1.0 / window_years as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(DailyClimatology { k, mean })
}

/// Align target-domain samples with the source (training) domain by
/// subtracting the per-day-of-year climatology difference
/// `target_clim - source_clim` from every conditioning frame and from
/// the target (averaged over its window days, consistent with shifting
/// the underlying dailies before averaging).
pub fn climatological_shift(
    samples: &mut [TrainingSample],
    source: &DailyClimatology,
    target: &DailyClimatology,
) -> Result<()> {
    if source.k != target.k {
        return Err(Error::ShapeMismatch {
            context: "climatological_shift gridpoints",
            expected: source.k,
            actual: target.k,
        });
    }
    let k = source.k;
    let delta_at = |doy: usize, g: usize| target.at(doy)[g] - source.at(doy)[g];
    for s in samples.iter_mut() {
        if s.conditioning.len() != CONDITIONING_FRAMES * k || s.target.len() != k {
            return Err(Error::ShapeMismatch {
                context: "climatological_shift sample",
                expected: k,
                actual: s.target.len(),
            });
        }
        for back in 0..CONDITIONING_FRAMES {
            let doy = (s.init_doy + DAYS_PER_YEAR - back) % DAYS_PER_YEAR;
            for g in 0..k {
                s.conditioning[back * k + g] -= delta_at(doy, g);
            }
        }
        let inv = 1.0 / s.target_doys.len() as f64;
        for g in 0..k {
            let mean_delta: f64 =
                s.target_doys.iter().map(|doy| delta_at(*doy, g)).sum::<f64>() * inv;
            s.target[g] -= mean_delta;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Climatology serialization (binary frames keyed by day-of-year)
// ---------------------------------------------------------------------------

pub fn write_climatology(path: &Path, clim: &LeadClimatology) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * (clim.det.len() + clim.prob.len()));
    buf.extend_from_slice(CLIMATOLOGY_MAGIC);
    buf.extend_from_slice(&(clim.k as u32).to_le_bytes());
    buf.extend_from_slice(&(DAYS_PER_YEAR as u32).to_le_bytes());
    buf.extend_from_slice(&(clim.window_years as u32).to_le_bytes());
    for v in clim.det.iter().chain(clim.prob.iter()) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_climatology(path: &Path) -> Result<LeadClimatology> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[0..4] != CLIMATOLOGY_MAGIC {
        return Err(bad("missing LRC1 magic"));
    }
    let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let days = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let years = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if days != DAYS_PER_YEAR {
        return Err(bad("unexpected day count"));
    }
    let det_len = days * k;
    let prob_len = days * years * k;
    if bytes.len() != 16 + 4 * (det_len + prob_len) {
        return Err(bad("truncated climatology"));
    }
    let mut values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let det: Vec<f64> = values.by_ref().take(det_len).collect();
    let prob: Vec<f64> = values.collect();
    Ok(LeadClimatology { k, window_years: years, det, prob })
}
