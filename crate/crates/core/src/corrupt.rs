//! Corruption injection. Each attack returns the corrupted dataset together
//! with the ground-truth mask of the steps it touched.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ChannelSelect, CorruptionMask, TrajectoryDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionFamily {
    UniformState,
    UniformFullElement,
    GaussianState,
    MissingZeroActions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub family: CorruptionFamily,
    /// Fraction of steps corrupted.
    pub rate: f64,
    /// Per-dimension noise scale in units of the channel's std.
    pub scale: f64,
    #[serde(default = "default_reward_multiplier")]
    pub reward_multiplier: f64,
    pub seed: u64,
}

fn default_reward_multiplier() -> f64 {
    30.0
}

impl CorruptionSpec {
    pub fn new(family: CorruptionFamily, rate: f64, scale: f64, seed: u64) -> Self {
        Self {
            family,
            rate,
            scale,
            reward_multiplier: default_reward_multiplier(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::config("rate", format!("must lie in [0, 1], got {}", self.rate)));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::config("scale", format!("must be >= 0, got {}", self.scale)));
        }
        if !self.reward_multiplier.is_finite() {
            return Err(Error::config("reward_multiplier", "must be finite"));
        }
        Ok(())
    }
}

/// Dispatch on `spec.family`.
pub fn apply(d: &TrajectoryDataset, spec: &CorruptionSpec) -> Result<(TrajectoryDataset, CorruptionMask)> {
    match spec.family {
        CorruptionFamily::UniformState => random_state_attack(d, spec),
        CorruptionFamily::UniformFullElement => random_full_element_attack(d, spec),
        CorruptionFamily::GaussianState => gaussian_state_attack(d, spec),
        CorruptionFamily::MissingZeroActions => zero_missing_attack(d, spec),
    }
}

/// Draw `round(rate * N)` distinct global step indices, ascending.
fn choose_steps(d: &TrajectoryDataset, spec: &CorruptionSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = d.num_steps();
    let count = (spec.rate * n as f64).round() as usize;
    if spec.rate > 0.0 && count == 0 {
        log::warn!(
            "corruption rate {} selects no steps out of {n}; dataset left unchanged",
            spec.rate
        );
    }
    let mut chosen = index::sample(rng, n, count).into_vec();
    chosen.sort_unstable();
    chosen
}

fn check_family(spec: &CorruptionSpec, expected: CorruptionFamily) -> Result<()> {
    spec.validate()?;
    if spec.family != expected {
        return Err(Error::Argument(format!(
            "spec family {:?} does not match attack {:?}",
            spec.family, expected
        )));
    }
    Ok(())
}

/// Uniform draw in `[-scale, scale]`.
fn uniform_sym(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    scale * (2.0 * rng.random::<f64>() - 1.0)
}

fn perturb_states(
    out: &mut TrajectoryDataset,
    steps: &[usize],
    std: &[f64],
    mut draw: impl FnMut(&mut ChaCha8Rng) -> f64,
    rng: &mut ChaCha8Rng,
) {
    let states = out.layout().states();
    for &g in steps {
        let at = out.step_index(g);
        let mut row = out.row_mut(at);
        for (i, c) in states.clone().enumerate() {
            row[c] += draw(rng) * std[i];
        }
    }
}

fn mask_for(d: &TrajectoryDataset, steps: &[usize]) -> CorruptionMask {
    let mut mask = CorruptionMask::empty_for(d);
    for &g in steps {
        mask.set(g);
    }
    mask
}

/// `s_hat = s + lambda * std(s)` with `lambda ~ Uniform[-scale, scale]^{d_s}`.
pub fn random_state_attack(
    d: &TrajectoryDataset,
    spec: &CorruptionSpec,
) -> Result<(TrajectoryDataset, CorruptionMask)> {
    check_family(spec, CorruptionFamily::UniformState)?;
    let std = d.per_dim_std(ChannelSelect::State)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let steps = choose_steps(d, spec, &mut rng);
    let mut out = d.clone();
    let scale = spec.scale;
    perturb_states(&mut out, &steps, &std, |r| uniform_sym(r, scale), &mut rng);
    Ok((out, mask_for(d, &steps)))
}

/// As the state attack, with `lambda ~ N(0, scale^2)` per dimension.
pub fn gaussian_state_attack(
    d: &TrajectoryDataset,
    spec: &CorruptionSpec,
) -> Result<(TrajectoryDataset, CorruptionMask)> {
    check_family(spec, CorruptionFamily::GaussianState)?;
    let std = d.per_dim_std(ChannelSelect::State)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let steps = choose_steps(d, spec, &mut rng);
    let mut out = d.clone();
    let scale = spec.scale;
    perturb_states(
        &mut out,
        &steps,
        &std,
        |r| scale * r.sample::<f64, _>(StandardNormal),
        &mut rng,
    );
    Ok((out, mask_for(d, &steps)))
}

/// Corrupt states and actions additively and replace the reward with a
/// draw from `Uniform[-m * scale, m * scale]` (`m = reward_multiplier`).
pub fn random_full_element_attack(
    d: &TrajectoryDataset,
    spec: &CorruptionSpec,
) -> Result<(TrajectoryDataset, CorruptionMask)> {
    check_family(spec, CorruptionFamily::UniformFullElement)?;
    let layout = d.layout();
    let reward = layout.reward().ok_or_else(|| {
        Error::Argument("full-element attack needs a reward channel".into())
    })?;
    if layout.action_dim == 0 {
        return Err(Error::Argument("full-element attack needs action channels".into()));
    }
    let state_std = d.per_dim_std(ChannelSelect::State)?;
    let action_std = d.per_dim_std(ChannelSelect::Action)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let steps = choose_steps(d, spec, &mut rng);
    let mut out = d.clone();
    let scale = spec.scale;
    let reward_scale = spec.reward_multiplier * scale;
    for &g in &steps {
        let at = out.step_index(g);
        let mut row = out.row_mut(at);
        for (i, c) in layout.states().enumerate() {
            row[c] += uniform_sym(&mut rng, scale) * state_std[i];
        }
        for (i, c) in layout.actions().enumerate() {
            row[c] += uniform_sym(&mut rng, scale) * action_std[i];
        }
        row[reward] = uniform_sym(&mut rng, reward_scale);
    }
    Ok((out, mask_for(d, &steps)))
}

/// Zero every action dimension of the chosen steps.
pub fn zero_missing_attack(
    d: &TrajectoryDataset,
    spec: &CorruptionSpec,
) -> Result<(TrajectoryDataset, CorruptionMask)> {
    check_family(spec, CorruptionFamily::MissingZeroActions)?;
    let actions = d.layout().actions();
    if actions.is_empty() {
        return Err(Error::Argument("missing-action attack needs action channels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let steps = choose_steps(d, spec, &mut rng);
    let mut out = d.clone();
    for &g in &steps {
        let at = out.step_index(g);
        let mut row = out.row_mut(at);
        for c in actions.clone() {
            row[c] = 0.0;
        }
    }
    Ok((out, mask_for(d, &steps)))
}
