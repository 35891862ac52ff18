//! Probabilistic forecast verification: CRPS, ensemble-mean RMSE,
//! unbiased spread and spread-skill, lead-dependent bias correction,
//! paired significance maps with false-discovery-rate control, and
//! bootstrap confidence intervals.
//!
//! Scores are uniform over the ring (no area weighting analog).

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::sampler::EnsembleForecast;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// CRPS of an ensemble against one observation:
/// `(1/E) sum |x_i - y| - (1/(2 E^2)) sum_ij |x_i - x_j|`.
///
/// The `fair` variant divides the pairwise term by `E (E - 1)` instead.
pub fn crps_ensemble_with(members: &[f64], obs: f64, fair: bool) -> Result<f64> {
    let e = members.len();
    if e == 0 {
        return Err(Error::InsufficientData { context: "crps_ensemble members", need: 1, have: 0 });
    }
    if fair && e < 2 {
        return Err(Error::InsufficientData {
            context: "fair crps needs at least two members",
            need: 2,
            have: e,
        });
    }
    let mae: f64 = members.iter().map(|x| (x - obs).abs()).sum::<f64>() / e as f64;
    let mut pairwise = 0.0;
    for i in 0..e {
        for j in i + 1..e {
            pairwise += (members[i] - members[j]).abs();
        }
    }
    pairwise *= 2.0; // full double sum
    let denom = if fair {
        (e * (e - 1)) as f64 * 2.0
    } else {
        (e * e) as f64 * 2.0
    };
    Ok(mae - pairwise / denom)
}

/// Standard (Hersbach) CRPS estimator.
pub fn crps_ensemble(members: &[f64], obs: f64) -> Result<f64> {
    crps_ensemble_with(members, obs, false)
}

type CasePair<'a> = (&'a EnsembleForecast, &'a [f64]);

fn check_cases(cases: &[CasePair<'_>]) -> Result<usize> {
    if cases.is_empty() {
        return Err(Error::InsufficientData { context: "verification cases", need: 1, have: 0 });
    }
    let k = cases[0].0.k;
    for (f, t) in cases {
        if f.k != k || t.len() != k {
            return Err(Error::ShapeMismatch {
                context: "verification case grid",
                expected: k,
                actual: t.len(),
            });
        }
    }
    Ok(k)
}

/// Per-case, per-gridpoint CRPS; rows are cases.
pub fn crps_case_grid(cases: &[CasePair<'_>]) -> Result<Vec<f64>> {
    let k = check_cases(cases)?;
    let mut out = Vec::with_capacity(cases.len() * k);
    for (f, t) in cases {
        for g in 0..k {
            out.push(crps_ensemble(&f.at_gridpoint(g), t[g])?);
        }
    }
    Ok(out)
}

/// Case-and-gridpoint mean CRPS.
pub fn mean_crps(cases: &[CasePair<'_>]) -> Result<f64> {
    let grid = crps_case_grid(cases)?;
    Ok(grid.iter().sum::<f64>() / grid.len() as f64)
}

/// Root of the case-and-gridpoint mean squared ensemble-mean error.
pub fn ensemble_mean_rmse(cases: &[CasePair<'_>]) -> Result<f64> {
    let k = check_cases(cases)?;
    let mut acc = 0.0;
    for (f, t) in cases {
        let mean = f.ensemble_mean();
        for g in 0..k {
            let err = mean[g] - t[g];
            acc += err * err;
        }
    }
    Ok((acc / (cases.len() * k) as f64).sqrt())
}

/// Square root of the mean per-case unbiased sample variance.
pub fn ensemble_spread(cases: &[CasePair<'_>]) -> Result<f64> {
    let k = check_cases(cases)?;
    let e = cases[0].0.ensemble_size();
    if e < 2 {
        return Err(Error::InsufficientData {
            context: "ensemble_spread members",
            need: 2,
            have: e,
        });
    }
    let mut acc = 0.0;
    for (f, _) in cases {
        let mean = f.ensemble_mean();
        for g in 0..k {
            let mut var = 0.0;
            for m in 0..e {
                let d = f.member(m)[g] - mean[g];
                var += d * d;
            }
            acc += var / (e - 1) as f64;
        }
    }
    Ok((acc / (cases.len() * k) as f64).sqrt())
}

/// Finite-ensemble-corrected spread over skill:
/// `sqrt((E+1)/E) * spread / rmse`; 1 indicates calibration.
pub fn spread_skill_ratio(cases: &[CasePair<'_>]) -> Result<f64> {
    let e = cases
        .first()
        .map(|(f, _)| f.ensemble_size())
        .unwrap_or(0);
    if e < 2 {
        return Err(Error::InsufficientData {
            context: "spread_skill_ratio members",
            need: 2,
            have: e,
        });
    }
    let spread = ensemble_spread(cases)?;
    let rmse = ensemble_mean_rmse(cases)?;
    if rmse == 0.0 {
        return Ok(if spread == 0.0 { f64::NAN } else { f64::INFINITY });
    }
    Ok(((e + 1) as f64 / e as f64).sqrt() * spread / rmse)
}

// ---------------------------------------------------------------------------
// Lead-time-dependent bias correction
// ---------------------------------------------------------------------------

/// Mean forecast bias per day-of-year, estimated from reforecasts.
#[derive(Debug, Clone)]
pub struct BiasTable {
    pub k: usize,
    by_doy: BTreeMap<usize, Vec<f64>>,
}

impl BiasTable {
    pub fn bias_at(&self, doy: usize) -> Option<&[f64]> {
        self.by_doy.get(&doy).map(|v| v.as_slice())
    }
}

/// One reforecast record: initialization day-of-year, the reforecast
/// ensemble mean, and the verifying truth for the same target window.
pub struct ReforecastRecord {
    pub doy: usize,
    pub ens_mean: Vec<f64>,
    pub truth: Vec<f64>,
}

/// Build the per-day-of-year mean bias from at least `window_years`
/// reforecasts per day-of-year present in the records.
pub fn reforecast_bias(records: &[ReforecastRecord], window_years: usize) -> Result<BiasTable> {
    if records.is_empty() {
        return Err(Error::InsufficientData { context: "reforecast records", need: 1, have: 0 });
    }
    let k = records[0].ens_mean.len();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        if r.ens_mean.len() != k || r.truth.len() != k {
            return Err(Error::ShapeMismatch {
                context: "reforecast record grid",
                expected: k,
                actual: r.ens_mean.len(),
            });
        }
        let entry = sums.entry(r.doy).or_insert_with(|| (vec![0.0; k], 0));
        for (s, (m, t)) in entry.0.iter_mut().zip(r.ens_mean.iter().zip(&r.truth)) {
            *s += m - t;
        }
        entry.1 += 1;
    }
    let mut by_doy = BTreeMap::new();
    for (doy, (sum, count)) in sums {
        if count < window_years {
            return Err(Error::InsufficientData {
                context: "reforecast coverage for day-of-year",
                need: window_years,
                have: count,
            });
        }
        by_doy.insert(doy, sum.iter().map(|s| s / count as f64).collect());
    }
    Ok(BiasTable { k, by_doy })
}

/// Subtract the day-of-year bias from every member of each forecast.
/// `doys` gives the initialization day-of-year per forecast.
pub fn bias_correct(
    forecasts: &mut [EnsembleForecast],
    doys: &[usize],
    table: &BiasTable,
) -> Result<()> {
    if forecasts.len() != doys.len() {
        return Err(Error::ShapeMismatch {
            context: "bias_correct doys",
            expected: forecasts.len(),
            actual: doys.len(),
        });
    }
    for (f, doy) in forecasts.iter_mut().zip(doys) {
        let bias = table.bias_at(*doy).ok_or(Error::InsufficientData {
            context: "reforecast coverage for evaluation day-of-year",
            need: 1,
            have: 0,
        })?;
        if f.k != table.k {
            return Err(Error::ShapeMismatch {
                context: "bias_correct grid",
                expected: table.k,
                actual: f.k,
            });
        }
        let e = f.ensemble_size();
        for m in 0..e {
            for g in 0..f.k {
                f.members[m * f.k + g] -= bias[g];
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Significance testing
// ---------------------------------------------------------------------------

/// Two-tailed paired t-test p-value on a difference series. A series of
/// identical values (zero variance) is maximally insignificant.
pub fn paired_t_pvalue(diffs: &[f64]) -> Result<f64> {
    let n = diffs.len();
    if n < 3 {
        return Err(Error::InsufficientData { context: "paired t-test cases", need: 3, have: n });
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(1.0);
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::numeric(format!("t distribution: {e}")))?;
    Ok(2.0 * (1.0 - dist.cdf(t.abs())))
}

/// Benjamini-Hochberg step-up procedure: reject exactly the hypotheses
/// with `p_(i) <= k* alpha / m` for the largest such `k*`.
pub fn benjamini_hochberg(p_values: &[f64], alpha: f64) -> Vec<bool> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|a, b| p_values[*a].partial_cmp(&p_values[*b]).unwrap());
    let mut k_star = 0;
    for (rank, idx) in order.iter().enumerate() {
        if p_values[*idx] <= (rank + 1) as f64 * alpha / m as f64 {
            k_star = rank + 1;
        }
    }
    let mut reject = vec![false; m];
    for idx in order.iter().take(k_star) {
        reject[*idx] = true;
    }
    reject
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignificanceMap {
    pub p_values: Vec<f64>,
    pub mask: Vec<bool>,
    pub alpha: f64,
}

impl SignificanceMap {
    pub fn fraction_significant(&self) -> f64 {
        self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len().max(1) as f64
    }
}

/// Paired t-test per gridpoint on score differences A - B, then BH
/// across gridpoints. Scores are `[cases x K]` row-major.
pub fn significance_map(
    scores_a: &[f64],
    scores_b: &[f64],
    k: usize,
    alpha: f64,
) -> Result<SignificanceMap> {
    if scores_a.len() != scores_b.len() || scores_a.len() % k != 0 {
        return Err(Error::ShapeMismatch {
            context: "significance_map scores",
            expected: scores_a.len(),
            actual: scores_b.len(),
        });
    }
    let cases = scores_a.len() / k;
    if cases < 3 {
        return Err(Error::InsufficientData {
            context: "significance_map cases",
            need: 3,
            have: cases,
        });
    }
    let mut p_values = Vec::with_capacity(k);
    for g in 0..k {
        let diffs: Vec<f64> = (0..cases)
            .map(|c| scores_a[c * k + g] - scores_b[c * k + g])
            .collect();
        p_values.push(paired_t_pvalue(&diffs)?);
    }
    let mask = benjamini_hochberg(&p_values, alpha);
    Ok(SignificanceMap { p_values, mask, alpha })
}

// ---------------------------------------------------------------------------
// Bootstrap confidence intervals and percent change
// ---------------------------------------------------------------------------

/// Seeded percentile bootstrap CI for the mean of a per-case series.
pub fn bootstrap_ci(
    values: &[f64],
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 10 {
        return Err(Error::InsufficientData { context: "bootstrap_ci cases", need: 10, have: n });
    }
    let mut rng = rng::stream_rng(seed, stream::BOOTSTRAP, 0);
    let mut means = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += values[rng.gen_range(0..n)];
        }
        means.push(acc / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&means, tail), quantile_sorted(&means, 1.0 - tail)))
}

/// Linear-interpolation quantile of a sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Per-case percent change of model vs baseline scores, plus its mean.
pub fn percent_change_vs_baseline(model: &[f64], baseline: &[f64]) -> Result<(Vec<f64>, f64)> {
    if model.len() != baseline.len() || model.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "percent_change series",
            expected: baseline.len(),
            actual: model.len(),
        });
    }
    let per_case: Vec<f64> = model
        .iter()
        .zip(baseline)
        .map(|(m, b)| {
            if *b == 0.0 {
                0.0
            } else {
                (m - b) / b * 100.0
            }
        })
        .collect();
    let mean = per_case.iter().sum::<f64>() / per_case.len() as f64;
    Ok((per_case, mean))
}

// ---------------------------------------------------------------------------
// Score reports
// ---------------------------------------------------------------------------

/// Comparison against a named baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub percent_change_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub significance: Option<SignificanceMap>,
}

/// Per-gridpoint and aggregate scores for one forecast system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub name: String,
    pub metric: String,
    /// Time-mean score per gridpoint.
    pub per_gridpoint: Vec<f64>,
    /// Global (ring-mean) score per case.
    pub per_case: Vec<f64>,
    pub case_times: Vec<f64>,
    pub global_mean: f64,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
}

impl ScoreReport {
    /// Build a CRPS report from forecast/truth case pairs.
    pub fn crps(name: &str, cases: &[CasePair<'_>]) -> Result<Self> {
        let k = check_cases(cases)?;
        let grid = crps_case_grid(cases)?;
        let n = cases.len();
        let mut per_gridpoint = vec![0.0; k];
        let mut per_case = vec![0.0; n];
        for c in 0..n {
            for g in 0..k {
                let v = grid[c * k + g];
                per_gridpoint[g] += v / n as f64;
                per_case[c] += v / k as f64;
            }
        }
        let global_mean = per_case.iter().sum::<f64>() / n as f64;
        Ok(ScoreReport {
            name: name.to_string(),
            metric: "crps".to_string(),
            per_gridpoint,
            per_case,
            case_times: cases.iter().map(|(f, _)| f.init_time).collect(),
            global_mean,
            comparisons: Vec::new(),
        })
    }

    /// Per-case CSV: `case,time,score`.
    pub fn write_cases_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "case,time,{}", self.metric)?;
        for (i, (t, v)) in self.case_times.iter().zip(&self.per_case).enumerate() {
            writeln!(f, "{i},{t},{v}")?;
        }
        Ok(())
    }
}

/// Gridpoint-indexed CSV of a significance mask.
pub fn write_significance_csv(path: &Path, map: &SignificanceMap) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "gridpoint,p_value,significant")?;
    for (g, (p, m)) in map.p_values.iter().zip(&map.mask).enumerate() {
        writeln!(f, "{g},{p},{}", if *m { 1 } else { 0 })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::LeadLabel;

    fn forecast(members: Vec<f64>, k: usize) -> EnsembleForecast {
        EnsembleForecast {
            members,
            k,
            init_time: 0.0,
            lead: LeadLabel::Medium,
            guidance_weight: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn crps_single_member_is_absolute_error() {
        assert_eq!(crps_ensemble(&[2.0], 0.5).unwrap(), 1.5);
    }

    #[test]
    fn crps_two_members_quarter() {
        let v = crps_ensemble(&[0.0, 1.0], 0.5).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn crps_perfect_ensemble_is_zero() {
        let v = crps_ensemble(&[0.7, 0.7, 0.7], 0.7).unwrap();
        assert!(v.abs() < 1e-15);
    }

    /// Exact piecewise integral of (F_ens - H_obs)^2 as an independent
    /// oracle, evaluated between consecutive breakpoints where both step
    /// functions are constant.
    fn crps_integral_oracle(members: &[f64], obs: f64) -> f64 {
        let mut pts: Vec<f64> = members.to_vec();
        pts.push(obs);
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let e = members.len() as f64;
        let mut total = 0.0;
        for w in pts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if hi <= lo {
                continue;
            }
            let mid = 0.5 * (lo + hi);
            let f = members.iter().filter(|m| **m <= mid).count() as f64 / e;
            let h = if obs <= mid { 1.0 } else { 0.0 };
            total += (f - h) * (f - h) * (hi - lo);
        }
        total
    }

    #[test]
    fn crps_matches_numeric_integral_on_random_ensembles() {
        let mut rng = crate::rng::stream_rng(3, 0x77, 0);
        for _ in 0..200 {
            let e = rng.gen_range(1..=8);
            let members: Vec<f64> = (0..e).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let obs = rng.gen_range(-3.5..3.5);
            let est = crps_ensemble(&members, obs).unwrap();
            let oracle = crps_integral_oracle(&members, obs);
            assert!(
                (est - oracle).abs() < 1e-10,
                "estimator {est} vs integral {oracle}"
            );
        }
    }

    #[test]
    fn crps_is_permutation_invariant_and_nonnegative() {
        let mut rng = crate::rng::stream_rng(4, 0x78, 0);
        for _ in 0..50 {
            let mut members: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let obs = rng.gen_range(-2.0..2.0);
            let a = crps_ensemble(&members, obs).unwrap();
            members.reverse();
            members.swap(1, 3);
            let b = crps_ensemble(&members, obs).unwrap();
            assert!((a - b).abs() < 1e-14);
            assert!(a >= 0.0);
        }
    }

    #[test]
    fn rmse_trivial_cases() {
        let f = forecast(vec![1.0, 2.0, 1.0, 2.0], 2); // two members, mean (1,2)
        let truth = vec![1.0, 2.0];
        let cases = vec![(&f, truth.as_slice())];
        assert_eq!(ensemble_mean_rmse(&cases).unwrap(), 0.0);

        let truth2 = vec![3.0, 4.0]; // error 2 everywhere
        let cases2 = vec![(&f, truth2.as_slice())];
        assert!((ensemble_mean_rmse(&cases2).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn rmse_matches_scalar_loop_oracle() {
        let mut rng = crate::rng::stream_rng(5, 0x79, 0);
        let k = 3;
        let e = 4;
        let fcsts: Vec<EnsembleForecast> = (0..5)
            .map(|_| {
                forecast(
                    (0..e * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    k,
                )
            })
            .collect();
        let truths: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let cases: Vec<CasePair> = fcsts
            .iter()
            .zip(truths.iter().map(|t| t.as_slice()))
            .collect();
        let ours = ensemble_mean_rmse(&cases).unwrap();

        let mut acc = 0.0;
        let mut count = 0;
        for (f, t) in &cases {
            for g in 0..k {
                let mut mean = 0.0;
                for m in 0..e {
                    mean += f.members[m * k + g];
                }
                mean /= e as f64;
                acc += (mean - t[g]) * (mean - t[g]);
                count += 1;
            }
        }
        let oracle = (acc / count as f64).sqrt();
        assert!((ours - oracle).abs() < 1e-12);
    }

    #[test]
    fn spread_arithmetic() {
        let f = forecast(vec![0.0, 2.0], 1); // members {0, 2}: variance 2
        let truth = vec![1.0];
        let cases = vec![(&f, truth.as_slice())];
        let spread = ensemble_spread(&cases).unwrap();
        assert!((spread - 2.0f64.sqrt()).abs() < 1e-14);

        // Zero spread with nonzero error: ratio collapses to zero.
        let zero = forecast(vec![3.0, 3.0, 3.0], 1);
        let cases0 = vec![(&zero, truth.as_slice())];
        assert_eq!(ensemble_spread(&cases0).unwrap(), 0.0);
        assert_eq!(spread_skill_ratio(&cases0).unwrap(), 0.0);
    }

    #[test]
    fn calibrated_synthetic_spread_skill_near_one() {
        let mut rng = crate::rng::stream_rng(6, 0x7a, 0);
        let e = 8;
        let n = 10_000;
        let mut fcsts = Vec::with_capacity(n);
        let mut truths = Vec::with_capacity(n);
        for _ in 0..n {
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                let u1: f64 = rng.gen::<f64>().max(1e-12);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            };
            let members: Vec<f64> = (0..e).map(|_| draw(&mut rng)).collect();
            fcsts.push(forecast(members, 1));
            truths.push(vec![draw(&mut rng)]);
        }
        let cases: Vec<CasePair> = fcsts
            .iter()
            .zip(truths.iter().map(|t| t.as_slice()))
            .collect();
        let ratio = spread_skill_ratio(&cases).unwrap();
        assert!((ratio - 1.0).abs() < 0.05, "ratio = {ratio}");

        // Inflating members 2x about their mean doubles the ratio.
        let mut inflated = fcsts.clone();
        for f in inflated.iter_mut() {
            let mean = f.ensemble_mean()[0];
            for v in f.members.iter_mut() {
                *v = mean + 2.0 * (*v - mean);
            }
        }
        let cases2: Vec<CasePair> = inflated
            .iter()
            .zip(truths.iter().map(|t| t.as_slice()))
            .collect();
        let ratio2 = spread_skill_ratio(&cases2).unwrap();
        assert!((ratio2 / ratio - 2.0).abs() < 0.02, "ratio2/ratio = {}", ratio2 / ratio);
    }

    #[test]
    fn constant_bias_removed_exactly() {
        let k = 2;
        let bias = 0.8;
        let records: Vec<ReforecastRecord> = (0..20)
            .map(|y| ReforecastRecord {
                doy: 5,
                ens_mean: vec![1.0 + bias + 0.01 * y as f64, 2.0 + bias],
                truth: vec![1.0 + 0.01 * y as f64, 2.0],
            })
            .collect();
        let table = reforecast_bias(&records, 20).unwrap();
        let b = table.bias_at(5).unwrap();
        assert!((b[0] - bias).abs() < 1e-12);
        assert!((b[1] - bias).abs() < 1e-12);

        let mut f = vec![forecast(vec![1.0 + bias, 2.0 + bias], k)];
        bias_correct(&mut f, &[5], &table).unwrap();
        assert!((f[0].members[0] - 1.0).abs() < 1e-12);
        assert!((f[0].members[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn insufficient_reforecast_coverage_is_error() {
        let records: Vec<ReforecastRecord> = (0..5)
            .map(|_| ReforecastRecord { doy: 3, ens_mean: vec![1.0], truth: vec![0.5] })
            .collect();
        assert!(reforecast_bias(&records, 20).is_err());
    }

    #[test]
    fn bh_oracle_rejects_only_the_smallest() {
        let p = [0.01, 0.03, 0.04, 0.20];
        let reject = benjamini_hochberg(&p, 0.05);
        assert_eq!(reject, vec![true, false, false, false]);
    }

    #[test]
    fn bh_never_rejects_above_alpha() {
        let mut rng = crate::rng::stream_rng(8, 0x7b, 0);
        for _ in 0..50 {
            let m = rng.gen_range(1..30);
            let p: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
            let reject = benjamini_hochberg(&p, 0.05);
            for (pv, r) in p.iter().zip(&reject) {
                if *r {
                    assert!(*pv <= 0.05);
                }
            }
            // Exact characterization: rejected set = { i : p_i <= k* a / m }.
            let alpha = 0.05;
            let mut sorted: Vec<f64> = p.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut k_star = 0;
            for (i, pv) in sorted.iter().enumerate() {
                if *pv <= (i + 1) as f64 * alpha / m as f64 {
                    k_star = i + 1;
                }
            }
            let threshold = if k_star == 0 {
                -1.0
            } else {
                k_star as f64 * alpha / m as f64
            };
            for (pv, r) in p.iter().zip(&reject) {
                assert_eq!(*r, *pv <= threshold);
            }
        }
    }

    #[test]
    fn identical_series_yield_no_rejections() {
        let k = 4;
        let cases = 10;
        let mut rng = crate::rng::stream_rng(9, 0x7c, 0);
        let a: Vec<f64> = (0..cases * k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let map = significance_map(&a, &a, k, 0.05).unwrap();
        assert!(map.mask.iter().all(|m| !m));
        assert!(map.p_values.iter().all(|p| (*p - 1.0).abs() < 1e-12));
    }

    /// Power simulation: a 5-standard-error shift at one gridpoint among
    /// nulls is rejected in well over 90% of repetitions.
    #[test]
    fn shifted_gridpoint_is_detected_with_high_power() {
        let k = 4;
        let cases = 40;
        let reps = 200;
        let shift = 5.0 / (cases as f64).sqrt();
        let mut detected = 0;
        for rep in 0..reps {
            let mut rng = crate::rng::stream_rng(10 + rep, 0x7d, 0);
            let mut gauss = move || {
                let u1: f64 = rng.gen::<f64>().max(1e-12);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            };
            let mut a = vec![0.0; cases * k];
            let b = vec![0.0; cases * k];
            for c in 0..cases {
                for g in 0..k {
                    a[c * k + g] = gauss() + if g == 1 { shift } else { 0.0 };
                }
            }
            let map = significance_map(&a, &b, k, 0.05).unwrap();
            if map.mask[1] {
                detected += 1;
            }
        }
        let power = detected as f64 / reps as f64;
        assert!(power > 0.9, "power = {power}");
    }

    #[test]
    fn bootstrap_constant_series_degenerate_interval() {
        let values = vec![3.0; 20];
        let (lo, hi) = bootstrap_ci(&values, 500, 0.95, 1).unwrap();
        assert_eq!(lo, 3.0);
        assert_eq!(hi, 3.0);
    }

    #[test]
    fn bootstrap_symmetric_series_straddles_zero() {
        let values: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let (lo, hi) = bootstrap_ci(&values, 1000, 0.95, 2).unwrap();
        assert!(lo < 0.0 && hi > 0.0, "({lo}, {hi})");
    }

    #[test]
    fn percent_change_cases() {
        let (per_case, mean) = percent_change_vs_baseline(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(per_case, vec![0.0, 0.0]);
        assert_eq!(mean, 0.0);

        let baseline = [2.0, 4.0];
        let model = [1.8, 3.6];
        let (per_case, mean) = percent_change_vs_baseline(&model, &baseline).unwrap();
        for v in &per_case {
            assert!((v + 10.0).abs() < 1e-12);
        }
        assert!((mean + 10.0).abs() < 1e-12);

        // Scalar-loop oracle on a mixed series.
        let m = [1.0, 2.0, 3.0];
        let b = [2.0, 2.0, 2.0];
        let (pc, mn) = percent_change_vs_baseline(&m, &b).unwrap();
        let oracle: Vec<f64> = m.iter().zip(&b).map(|(x, y)| (x - y) / y * 100.0).collect();
        assert_eq!(pc, oracle);
        assert!((mn - oracle.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn score_report_and_csv() {
        let f1 = forecast(vec![0.0, 1.0, 1.0, 2.0], 2);
        let f2 = forecast(vec![0.5, 0.5, 1.5, 1.5], 2);
        let t1 = vec![0.5, 1.5];
        let t2 = vec![0.5, 1.5];
        let cases = vec![(&f1, t1.as_slice()), (&f2, t2.as_slice())];
        let report = ScoreReport::crps("student", &cases).unwrap();
        assert_eq!(report.per_case.len(), 2);
        assert_eq!(report.per_gridpoint.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cases.csv");
        report.write_cases_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("case,time,crps"));
        assert_eq!(text.lines().count(), 3);
    }
}
