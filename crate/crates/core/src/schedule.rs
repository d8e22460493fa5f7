//! Variance-preserving diffusion schedule.
//!
//! Steps are indexed `1..=K`; index 0 denotes the data itself, so
//! `alpha_bar(0) == 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serialized schedule parameters. The cumulative tables are always
/// recomputed from these three numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    #[serde(rename = "K")]
    pub steps: usize,
    pub beta_first: f64,
    pub beta_last: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_first: 1e-4,
            beta_last: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::linear(self.steps, self.beta_first, self.beta_last)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Coefficients of the conditional law `x^k | x^{k_a}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeCoefficients {
    pub signal: f64,
    pub noise: f64,
}

/// Regression coefficients of the ambient objective: the residual is
/// `a * x^k - b * eps(x^k, k) - x^{k_a}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbientCoefficients {
    pub a: f64,
    pub b: f64,
}

impl VarianceSchedule {
    /// Linear beta schedule over `steps` diffusion steps.
    pub fn linear(steps: usize, beta_first: f64, beta_last: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config("K", format!("must be at least 2, got {steps}")));
        }
        if !(beta_first > 0.0 && beta_first < 1.0) {
            return Err(Error::config(
                "beta_first",
                format!("must lie in (0, 1), got {beta_first}"),
            ));
        }
        if !(beta_last < 1.0 && beta_last >= beta_first) {
            return Err(Error::config(
                "beta_last",
                format!("must lie in [beta_first, 1), got {beta_last}"),
            ));
        }

        let span = (steps - 1) as f64;
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_first + (beta_last - beta_first) * i as f64 / span)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();

        Ok(Self {
            config: ScheduleConfig {
                steps,
                beta_first,
                beta_last,
            },
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// Total number of diffusion steps `K`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[self.index(k)]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[self.index(k)]
    }

    /// Cumulative product of `alpha` up to `k`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[self.index(k)]
        }
    }

    /// Posterior variance of the reverse transition at step `k`.
    pub fn posterior_variance(&self, k: usize) -> f64 {
        self.beta(k) * (1.0 - self.alpha_bar(k - 1)) / (1.0 - self.alpha_bar(k))
    }

    fn index(&self, k: usize) -> usize {
        assert!(
            (1..=self.steps()).contains(&k),
            "diffusion step {k} outside 1..={}",
            self.steps()
        );
        k - 1
    }

    fn check_pair(&self, k_a: usize, k: usize) -> Result<()> {
        if k_a == 0 || k_a > k || k > self.steps() {
            return Err(Error::Argument(format!(
                "diffusion steps must satisfy 1 <= k_a <= k <= {}, got k_a={k_a}, k={k}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn bridge_coefficients(&self, k_a: usize, k: usize) -> Result<BridgeCoefficients> {
        self.check_pair(k_a, k)?;
        Ok(bridge_from_alpha_bars(self.alpha_bar(k_a), self.alpha_bar(k)))
    }

    pub fn ambient_coefficients(&self, k_a: usize, k: usize) -> Result<AmbientCoefficients> {
        self.check_pair(k_a, k)?;
        Ok(ambient_from_alpha_bars(self.alpha_bar(k_a), self.alpha_bar(k)))
    }
}

pub fn bridge_from_alpha_bars(ab_a: f64, ab_k: f64) -> BridgeCoefficients {
    BridgeCoefficients {
        signal: (ab_k / ab_a).sqrt(),
        noise: ((ab_a - ab_k) / ab_a).max(0.0).sqrt(),
    }
}

pub fn ambient_from_alpha_bars(ab_a: f64, ab_k: f64) -> AmbientCoefficients {
    AmbientCoefficients {
        a: (ab_a / ab_k).sqrt(),
        b: (ab_a - ab_k) / (ab_a * ab_k * (1.0 - ab_k)).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> VarianceSchedule {
        ScheduleConfig::default().build().unwrap()
    }

    #[test]
    fn first_step_is_single_factor() {
        let s = default_schedule();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert_eq!(s.alpha(1), 1.0 - s.beta(1));
    }

    #[test]
    fn two_step_half_schedule() {
        let s = VarianceSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(2), 0.25);
    }

    #[test]
    fn final_alpha_bar_matches_direct_product() {
        // Frozen from an independent product over the beta sequence.
        const ALPHA_BAR_100: f64 = 0.3635632480554922;
        let s = default_schedule();
        let rel = (s.alpha_bar(100) - ALPHA_BAR_100).abs() / ALPHA_BAR_100;
        assert!(rel < 1e-14, "rel err {rel}");
    }

    #[test]
    fn rejects_bad_config() {
        for (k, lo, hi, field) in [
            (1, 1e-4, 2e-2, "K"),
            (10, 0.0, 2e-2, "beta_first"),
            (10, 1e-4, 1.0, "beta_last"),
            (10, 0.3, 0.2, "beta_last"),
        ] {
            match VarianceSchedule::linear(k, lo, hi) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing_and_consistent() {
        let s = default_schedule();
        for k in 2..=s.steps() {
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
            let ratio = s.alpha_bar(k) / s.alpha_bar(k - 1);
            assert!((ratio - s.alpha(k)).abs() / s.alpha(k) < 1e-12);
        }
        assert!(s.alpha_bar(s.steps()) > 0.0);
    }

    #[test]
    fn bridge_examples() {
        let c = bridge_from_alpha_bars(0.8, 0.8);
        assert_eq!((c.signal, c.noise), (1.0, 0.0));
        let c = bridge_from_alpha_bars(0.8, 0.4);
        assert!((c.signal - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((c.noise - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn bridge_composition_identity_over_all_pairs() {
        let s = default_schedule();
        for k_a in 1..=100 {
            let mut prev_signal = f64::INFINITY;
            for k in k_a..=100 {
                let c = s.bridge_coefficients(k_a, k).unwrap();
                let lhs = c.signal.powi(2) * (1.0 - s.alpha_bar(k_a)) + c.noise.powi(2);
                assert!((lhs - (1.0 - s.alpha_bar(k))).abs() < 1e-12);
                assert!(c.signal < prev_signal);
                prev_signal = c.signal;
            }
        }
    }

    #[test]
    fn bridge_rejects_reversed_pair() {
        let s = default_schedule();
        assert!(matches!(s.bridge_coefficients(30, 10), Err(Error::Argument(_))));
        assert!(matches!(s.ambient_coefficients(30, 10), Err(Error::Argument(_))));
        assert!(matches!(s.ambient_coefficients(0, 10), Err(Error::Argument(_))));
    }

    #[test]
    fn ambient_examples() {
        let c = ambient_from_alpha_bars(0.9, 0.9);
        assert_eq!((c.a, c.b), (1.0, 0.0));
        let c = ambient_from_alpha_bars(0.9, 0.45);
        assert!((c.a - 2f64.sqrt()).abs() < 1e-15);
        let b = 0.45 / (0.9f64 * 0.45 * 0.55).sqrt();
        assert!((c.b - b).abs() < 1e-15);
    }

    #[test]
    fn ambient_table_matches_rederivation() {
        // Second route: the unsimplified fractions of the ambient objective.
        let s = default_schedule();
        for k_a in 1..=100 {
            for k in k_a..=100 {
                let (aa, ak) = (s.alpha_bar(k_a), s.alpha_bar(k));
                let a_ref = aa / (ak * aa).sqrt();
                let b_ref = (aa - ak) / (aa * ak * (1.0 - ak)).sqrt();
                let c = s.ambient_coefficients(k_a, k).unwrap();
                assert!((c.a - a_ref).abs() <= 1e-13 * a_ref);
                assert!((c.b - b_ref).abs() <= 1e-13 * b_ref.max(1e-300));
                assert!(c.a > 0.0);
                assert_eq!(c.b == 0.0, k == k_a);
            }
        }
    }

    #[test]
    fn posterior_variance_vanishes_at_first_step() {
        let s = default_schedule();
        assert_eq!(s.posterior_variance(1), 0.0);
        for k in 2..=s.steps() {
            let v = s.posterior_variance(k);
            assert!(v > 0.0 && v < s.beta(k));
        }
    }
}
