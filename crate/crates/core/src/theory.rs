//! Closed-form diagnostics for choosing `k_a` and reading detector scores.
//!
//! Corruption is modelled as isotropic Gaussian noise of scale `iota` on an
//! `m x n` block. After forward diffusion to step `k`, the clean and the
//! corrupted marginals are Gaussians with the same mean and per-entry
//! variances `1 - ab` and `1 - ab + iota^2 ab`; their variance ratio is `f`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::VarianceSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapQuery {
    pub iota: f64,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub c: f64,
    pub sigma: f64,
}

impl Default for GapQuery {
    fn default() -> Self {
        Self {
            iota: 1.0,
            m: 1,
            n: 1,
            k: 1,
            c: 0.1,
            sigma: 1.0,
        }
    }
}

impl GapQuery {
    pub fn validate(&self, s: &VarianceSchedule) -> Result<()> {
        if !(self.iota >= 0.0 && self.iota.is_finite()) {
            return Err(Error::config("theory.iota", "must be finite and non-negative"));
        }
        if self.m == 0 || self.n == 0 {
            return Err(Error::config("theory.m", "block dimensions must be positive"));
        }
        if self.k == 0 || self.k > s.steps() {
            return Err(Error::config("theory.k", format!("must lie in 1..={}", s.steps())));
        }
        if !(self.c > 0.0) {
            return Err(Error::config("theory.c", "must be positive"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("theory.sigma", "must be positive"));
        }
        Ok(())
    }

    fn entries(&self) -> f64 {
        (self.m * self.n) as f64
    }
}

/// Variance ratio between corrupted and clean marginals at `ab`.
pub fn variance_ratio(alpha_bar: f64, iota: f64) -> f64 {
    (1.0 - alpha_bar + iota * iota * alpha_bar) / (1.0 - alpha_bar)
}

/// KL divergence between the clean and corrupted marginals at `ab` over
/// `entries` independent coordinates.
pub fn kl_gap_at(alpha_bar: f64, iota: f64, entries: f64) -> f64 {
    let f = variance_ratio(alpha_bar, iota);
    0.5 * entries * (f.ln() + 1.0 / f - 1.0)
}

pub fn kl_forward_gap(s: &VarianceSchedule, q: &GapQuery) -> Result<f64> {
    q.validate(s)?;
    Ok(kl_gap_at(s.alpha_bar(q.k), q.iota, q.entries()))
}

/// Smallest `k` whose forward gap is below `c`.
pub fn min_ambient_timestep(s: &VarianceSchedule, iota: f64, c: f64, m: usize, n: usize) -> Result<usize> {
    let q = GapQuery {
        iota,
        m,
        n,
        c,
        ..Default::default()
    };
    q.validate(s)?;
    (1..=s.steps())
        .find(|&k| kl_gap_at(s.alpha_bar(k), iota, q.entries()) < c)
        .ok_or_else(|| {
            Error::Argument(format!(
                "no diffusion step brings the gap below c = {c} (smallest is {:.4e} at k = {}); increase K or c",
                kl_gap_at(s.alpha_bar(s.steps()), iota, q.entries()),
                s.steps()
            ))
        })
}

/// Separation of corrupted from clean expected scores relative to the
/// predictor's own error.
pub fn snr_at(alpha_bar: f64, iota: f64, sigma: f64) -> f64 {
    iota * iota * alpha_bar / ((1.0 - alpha_bar) * sigma * sigma)
}

pub fn prediction_snr(s: &VarianceSchedule, k: usize, iota: f64, sigma: f64) -> Result<f64> {
    GapQuery {
        iota,
        k,
        sigma,
        ..Default::default()
    }
    .validate(s)?;
    Ok(snr_at(s.alpha_bar(k), iota, sigma))
}

/// Monte-Carlo estimate of [`kl_gap_at`] and its standard error, sampling
/// the clean marginal and averaging the log-density ratio.
pub fn kl_monte_carlo_at<R: Rng + ?Sized>(
    alpha_bar: f64,
    iota: f64,
    entries: usize,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if samples < 2 {
        return Err(Error::Argument("at least two samples are needed".into()));
    }
    let v_clean = 1.0 - alpha_bar;
    let v_noisy = v_clean + iota * iota * alpha_bar;
    let log_norm = 0.5 * (v_noisy / v_clean).ln();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let mut ratio = 0.0;
        for _ in 0..entries {
            // Offset from the shared mean; the mean itself cancels.
            let d: f64 = v_clean.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let d2 = d * d;
            ratio += log_norm - d2 / (2.0 * v_clean) + d2 / (2.0 * v_noisy);
        }
        sum += ratio;
        sum_sq += ratio * ratio;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

pub fn kl_monte_carlo<R: Rng + ?Sized>(
    s: &VarianceSchedule,
    q: &GapQuery,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    q.validate(s)?;
    kl_monte_carlo_at(s.alpha_bar(q.k), q.iota, q.m * q.n, samples, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub k: usize,
    pub alpha_bar: f64,
    pub kl: f64,
    pub snr: f64,
}

/// Forward gap and detection SNR for every diffusion step.
pub fn tradeoff_table(s: &VarianceSchedule, iota: f64, sigma: f64, m: usize, n: usize) -> Result<Vec<TradeoffRow>> {
    GapQuery {
        iota,
        m,
        n,
        sigma,
        ..Default::default()
    }
    .validate(s)?;
    Ok((1..=s.steps())
        .map(|k| {
            let ab = s.alpha_bar(k);
            TradeoffRow {
                k,
                alpha_bar: ab,
                kl: kl_gap_at(ab, iota, (m * n) as f64),
                snr: snr_at(ab, iota, sigma),
            }
        })
        .collect())
}

/// Expected squared norm of the predicted noise under the oracle model
/// below.
pub fn expected_prediction_energy(alpha_bar: f64, q: &GapQuery, noisy: bool) -> f64 {
    let excess = if noisy {
        q.iota * q.iota * alpha_bar / (1.0 - alpha_bar)
    } else {
        0.0
    };
    q.entries() * (q.sigma * q.sigma + excess)
}

/// One draw of `||eps_pred||^2` for a synthetic predictor that recovers the
/// noise implied by its input up to an independent error of std `sigma`.
///
/// The input is the consistency-scaled observation `sqrt(ab) * x_obs`,
/// where `x_obs` equals the clean block, plus `iota`-scaled Gaussian noise
/// when `noisy`.
pub fn prediction_energy_trial<R: Rng + ?Sized>(alpha_bar: f64, q: &GapQuery, noisy: bool, rng: &mut R) -> f64 {
    let scale = alpha_bar.sqrt();
    let mut energy = 0.0;
    for _ in 0..q.m * q.n {
        let clean: f64 = rng.sample(StandardNormal);
        let corruption = if noisy {
            q.iota * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        let input = scale * (clean + corruption);
        let implied = (input - scale * clean) / (1.0 - alpha_bar).sqrt();
        let pred = implied + q.sigma * rng.sample::<f64, _>(StandardNormal);
        energy += pred * pred;
    }
    energy
}

/// Mean and standard error of [`prediction_energy_trial`] over `trials`.
pub fn prediction_energy_mc<R: Rng + ?Sized>(
    alpha_bar: f64,
    q: &GapQuery,
    noisy: bool,
    trials: usize,
    rng: &mut R,
) -> (f64, f64) {
    let draws: Vec<f64> = (0..trials).map(|_| prediction_energy_trial(alpha_bar, q, noisy, rng)).collect();
    let n = trials as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-entry predictor error std implied by the mean score over steps
/// judged clean.
pub fn sigma_from_clean_scores(scores: &[f64], clean: &[usize], channels: usize) -> Result<f64> {
    if clean.is_empty() || channels == 0 {
        return Err(Error::Argument("need clean steps and at least one channel".into()));
    }
    let mean = clean.iter().map(|&i| scores[i]).sum::<f64>() / clean.len() as f64;
    Ok((mean / channels as f64).sqrt())
}
