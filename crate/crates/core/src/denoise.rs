//! Denoiser training on detected-clean steps and recovery of flagged steps.
//!
//! The denoiser is an ordinary noise-prediction model whose loss ignores
//! slice columns that the detector flagged. Recovery forward-noises a
//! flagged slice to `k_a` and runs the learned reverse process back to 0,
//! keeping only the center column.

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ambient::{ambient_loss_on, detector_config, sample_ambient_batch, AmbientTrainConfig};
use crate::data::{StepIndex, TrajectoryDataset};
use crate::detect::Split;
use crate::error::{Error, Result};
use crate::nnet::{init_predictor, train_step, Gradients, Mode, NetworkShape, PredictorConfig, PredictorParams};
use crate::schedule::VarianceSchedule;
use crate::training::{self, LossTracker, TrainLog};

/// Flagged steps recovered per batched pass.
pub const RECOVERY_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTrainConfig {
    #[serde(rename = "H")]
    pub h: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
    pub network: NetworkShape,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            h: 5,
            batch: 256,
            steps: 5000,
            lr: 1e-4,
            seed: 0,
            log_every: 100,
            network: NetworkShape::default(),
        }
    }
}

impl DenoiserTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("denoiser.batch", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("denoiser.lr", "must be positive"));
        }
        Ok(())
    }
}

/// Detection indicator of every column of the slice at `at`, following
/// edge replication: a replicated column takes the indicator of the step it
/// copies.
pub fn column_indicator(d: &TrajectoryDataset, indicator: &[bool], at: StepIndex, h: usize) -> Vec<bool> {
    let len = d.episodes()[at.episode].nrows() as isize;
    (0..2 * h + 1)
        .map(|j| {
            let src = (at.t as isize + j as isize - h as isize).clamp(0, len - 1) as usize;
            indicator[d.global_index(StepIndex { episode: at.episode, t: src })]
        })
        .collect()
}

/// Expand per-column indicators to a `1 x (M * W)` entry mask.
fn entry_mask(columns: &[bool], m: usize) -> impl Iterator<Item = f64> + '_ {
    columns
        .iter()
        .flat_map(move |&c| std::iter::repeat_n(if c { 1.0 } else { 0.0 }, m))
}

/// Noised inputs, the noise that produced them and a 0/1 entry mask.
#[derive(Debug, Clone)]
pub struct DdpmBatch {
    pub inputs: Array2<f64>,
    pub noise: Array2<f64>,
    pub ks: Vec<usize>,
    pub masks: Array2<f64>,
}

/// Forward-noise clean slices with one `k` per row drawn from `1..=K`.
pub fn sample_ddpm_batch<R: Rng + ?Sized>(
    s: &VarianceSchedule,
    slices: ArrayView2<f64>,
    masks: Array2<f64>,
    rng: &mut R,
) -> Result<DdpmBatch> {
    if masks.dim() != slices.dim() {
        return Err(Error::Argument("mask shape differs from slice batch".into()));
    }
    let rows = slices.nrows();
    let ks: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=s.steps())).collect();
    let noise = training::standard_normal(rng, slices.dim());
    let mut inputs = Array2::zeros(slices.dim());
    for (i, &k) in ks.iter().enumerate() {
        let ab = s.alpha_bar(k);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Zip::from(inputs.row_mut(i))
            .and(slices.row(i))
            .and(noise.row(i))
            .for_each(|x, &x0, &e| *x = a * x0 + b * e);
    }
    Ok(DdpmBatch {
        inputs,
        noise,
        ks,
        masks,
    })
}

/// Masked squared error summed over unmasked entries and divided by their
/// count, with its gradient in the predictions.
pub fn selective_residual_loss(batch: &DdpmBatch, predictions: &Array2<f64>) -> (f64, Array2<f64>) {
    let count: f64 = batch.masks.sum();
    let mut d_pred = Array2::zeros(predictions.raw_dim());
    if count == 0.0 {
        return (0.0, d_pred);
    }
    let mut total = 0.0;
    Zip::from(&mut d_pred)
        .and(predictions)
        .and(&batch.noise)
        .and(&batch.masks)
        .for_each(|g, &p, &e, &w| {
            let r = (e - p) * w;
            total += r * r;
            *g = -2.0 * r / count;
        });
    (total / count, d_pred)
}

pub fn selective_ddpm_loss_on<R: Rng + ?Sized>(
    params: &PredictorParams,
    batch: &DdpmBatch,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let (pred, cache) = params.forward(batch.inputs.view(), &batch.ks, mode, rng)?;
    let (loss, d_pred) = selective_residual_loss(batch, &pred);
    Ok((loss, params.backward(&cache, &d_pred)))
}

/// Sample noise for `slices`, mask with `masks`, and evaluate the selective
/// loss in training mode.
pub fn selective_ddpm_loss<R: Rng + ?Sized>(
    params: &PredictorParams,
    s: &VarianceSchedule,
    slices: ArrayView2<f64>,
    masks: Array2<f64>,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let batch = sample_ddpm_batch(s, slices, masks, rng)?;
    selective_ddpm_loss_on(params, &batch, Mode::Train, rng)
}

/// Plain noise-prediction loss over every entry, evaluation mode.
pub fn ddpm_loss(params: &PredictorParams, inputs: ArrayView2<f64>, noise: ArrayView2<f64>, ks: &[usize]) -> Result<f64> {
    let pred = params.predict(inputs, ks)?;
    let sq: f64 = (&noise - &pred).mapv(|v| v * v).sum();
    Ok(sq / noise.len() as f64)
}

/// Train a fresh denoiser on the detected-clean steps.
pub fn train_denoiser(
    d: &TrajectoryDataset,
    split: &Split,
    s: &VarianceSchedule,
    cfg: &DenoiserTrainConfig,
) -> Result<(PredictorParams, TrainLog)> {
    let config = PredictorConfig::for_slice(d.width(), cfg.h, &cfg.network, cfg.seed);
    let params = init_predictor(config)?;
    fit(params, d, split, s, cfg, None, 0, &mut |_, _| Ok(()))
}

/// Baseline detector trained with the plain noise-prediction loss over
/// every diffusion step on all (possibly corrupted) data, with the same
/// initialization and sampling budget as the ambient detector. Calls
/// `observer(step, params)` after every `every` updates.
pub fn train_naive_detector_observed(
    d: &TrajectoryDataset,
    s: &VarianceSchedule,
    cfg: &AmbientTrainConfig,
    every: usize,
    observer: &mut dyn FnMut(usize, &PredictorParams) -> Result<()>,
) -> Result<(PredictorParams, TrainLog)> {
    let params = init_predictor(detector_config(d, cfg))?;
    let everything = Split {
        zeta: 1.0,
        clean: (0..d.num_steps()).collect(),
        corrupted: Vec::new(),
        indicator: vec![true; d.num_steps()],
    };
    let dcfg = DenoiserTrainConfig {
        h: cfg.h,
        batch: cfg.batch,
        steps: cfg.steps,
        lr: cfg.lr,
        seed: cfg.seed,
        log_every: cfg.log_every,
        network: cfg.network.clone(),
    };
    fit(params, d, &everything, s, &dcfg, None, every, observer)
}

/// Continue training `params` on the sum of the ambient loss over every
/// step and the selective loss over the detected-clean steps.
pub fn continue_joint(
    params: PredictorParams,
    d: &TrajectoryDataset,
    split: &Split,
    s: &VarianceSchedule,
    cfg: &DenoiserTrainConfig,
    k_a: usize,
) -> Result<(PredictorParams, TrainLog)> {
    if params.input_dim() != d.width() * (2 * cfg.h + 1) {
        return Err(Error::Argument("detector and denoiser half-widths differ".into()));
    }
    fit(params, d, split, s, cfg, Some(k_a), 0, &mut |_, _| Ok(()))
}

fn fit(
    mut params: PredictorParams,
    d: &TrajectoryDataset,
    split: &Split,
    s: &VarianceSchedule,
    cfg: &DenoiserTrainConfig,
    joint_k_a: Option<usize>,
    every: usize,
    observer: &mut dyn FnMut(usize, &PredictorParams) -> Result<()>,
) -> Result<(PredictorParams, TrainLog)> {
    training::require_standardized(d)?;
    cfg.validate()?;
    if split.indicator.len() != d.num_steps() {
        return Err(Error::Argument("split does not cover the dataset".into()));
    }
    if split.clean.is_empty() {
        return Err(Error::NoCleanSamples(split.zeta));
    }
    let m = d.width();
    let dim = m * (2 * cfg.h + 1);
    let mut log = TrainLog::default();
    let mut tracker = LossTracker::new(cfg.log_every);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5E1E_C71F_0000_0002);
    let n = d.num_steps();
    for step in 0..cfg.steps {
        let mut centers = Vec::with_capacity(cfg.batch);
        let mut mask_values = Vec::with_capacity(cfg.batch * dim);
        for _ in 0..cfg.batch {
            let g = split.clean[rng.random_range(0..split.clean.len())];
            let cols = column_indicator(d, &split.indicator, d.step_index(g), cfg.h);
            if cols.iter().all(|c| !c) {
                log.skipped_slices += 1;
                continue;
            }
            mask_values.extend(entry_mask(&cols, m));
            centers.push(g);
        }
        if centers.is_empty() {
            continue;
        }
        let masks = Array2::from_shape_vec((centers.len(), dim), mask_values)
            .map_err(|e| Error::Internal(e.to_string()))?;
        let slices = training::gather_slices(d, &centers, cfg.h);
        let batch = sample_ddpm_batch(s, slices.view(), masks, &mut rng)?;
        log.observe_ks(&batch.ks);
        let (mut loss, mut grads) = selective_ddpm_loss_on(&params, &batch, Mode::Train, &mut rng)?;
        if let Some(k_a) = joint_k_a {
            let all: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..n)).collect();
            let amb = sample_ambient_batch(s, training::gather_slices(d, &all, cfg.h).view(), k_a, &mut rng)?;
            let (amb_loss, amb_grads) = ambient_loss_on(&params, s, k_a, &amb, Mode::Train, &mut rng)?;
            loss += amb_loss;
            grads.add_scaled(&amb_grads, 1.0);
        }
        tracker.record(&mut log, step, loss, || {
            format!(
                "{} slices, input norm {:.3e}",
                centers.len(),
                training::l2_norm(&batch.inputs)
            )
        })?;
        train_step(&mut params, &grads, cfg.lr)?;
        if every > 0 && (step + 1) % every == 0 {
            observer(step + 1, &params)?;
        }
    }
    Ok((params, log))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    SingleStep,
    #[default]
    ReverseChain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub mode: RecoveryMode,
    pub k_a: usize,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            mode: RecoveryMode::ReverseChain,
            k_a: 30,
            seed: 0,
        }
    }
}

/// Independent stream for the recovery of one step, so results do not
/// depend on processing order.
pub fn step_rng(seed: u64, at: StepIndex) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EC0_BE27_0000_0003);
    rng.set_stream(((at.episode as u64) << 32) | at.t as u64);
    rng
}

/// Run the configured recovery on a batch of standardized flattened slices.
///
/// `predict` maps `(inputs, ks)` to predicted noise; `rngs[i]` drives row
/// `i`. Returns the full recovered slices.
pub fn recover_batch_with<F>(
    s: &VarianceSchedule,
    slices: ArrayView2<f64>,
    cfg: &RecoveryConfig,
    rngs: &mut [ChaCha8Rng],
    mut predict: F,
) -> Result<Array2<f64>>
where
    F: FnMut(ArrayView2<f64>, &[usize]) -> Result<Array2<f64>>,
{
    if cfg.k_a == 0 || cfg.k_a > s.steps() {
        return Err(Error::config("recovery.k_a", format!("must lie in 1..={}", s.steps())));
    }
    if rngs.len() != slices.nrows() {
        return Err(Error::Argument("one generator per slice is required".into()));
    }
    let mut x = slices.mapv(|v| v * s.alpha_bar(cfg.k_a).sqrt());
    match cfg.mode {
        RecoveryMode::SingleStep => {
            let ab = s.alpha_bar(cfg.k_a);
            let eps = predict(x.view(), &vec![cfg.k_a; x.nrows()])?;
            Zip::from(&mut x)
                .and(&eps)
                .for_each(|v, &e| *v = (*v - (1.0 - ab).sqrt() * e) / ab.sqrt());
        }
        RecoveryMode::ReverseChain => {
            for k in (1..=cfg.k_a).rev() {
                let eps = predict(x.view(), &vec![k; x.nrows()])?;
                let coef = s.beta(k) / (1.0 - s.alpha_bar(k)).sqrt();
                let inv_sqrt_alpha = 1.0 / s.alpha(k).sqrt();
                Zip::from(&mut x)
                    .and(&eps)
                    .for_each(|v, &e| *v = (*v - coef * e) * inv_sqrt_alpha);
                if k > 1 {
                    let sd = s.posterior_variance(k).sqrt();
                    for (mut row, rng) in x.rows_mut().into_iter().zip(rngs.iter_mut()) {
                        row.iter_mut()
                            .for_each(|v| *v += sd * rng.sample::<f64, _>(rand_distr::StandardNormal));
                    }
                }
            }
        }
    }
    Ok(x)
}

fn half_width(params: &PredictorParams, m: usize) -> Result<usize> {
    let d = params.input_dim();
    if !d.is_multiple_of(m) || (d / m).is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "checkpoint input size {d} is not an odd multiple of {m} channels"
        )));
    }
    Ok((d / m - 1) / 2)
}

/// Recover one standardized slice of the dataset; returns the recovered
/// center column.
pub fn recover_slice(
    params: &PredictorParams,
    s: &VarianceSchedule,
    d: &TrajectoryDataset,
    at: StepIndex,
    cfg: &RecoveryConfig,
) -> Result<Vec<f64>> {
    let m = d.width();
    let h = half_width(params, m)?;
    let slices = training::gather_slices(d, &[d.global_index(at)], h);
    let mut rngs = [step_rng(cfg.seed, at)];
    let out = recover_batch_with(s, slices.view(), cfg, &mut rngs, |x, ks| params.predict(x, ks))?;
    Ok(out.row(0).iter().skip(h * m).take(m).copied().collect())
}

/// Replace the center column of every detected-corrupted step.
///
/// Recovery runs on `standardized`; results are mapped back through its
/// statistics and written into a copy of `raw`, so every step outside
/// `split.corrupted` is returned bit-for-bit.
pub fn recover_dataset(
    standardized: &TrajectoryDataset,
    raw: &TrajectoryDataset,
    split: &Split,
    params: &PredictorParams,
    s: &VarianceSchedule,
    cfg: &RecoveryConfig,
) -> Result<TrajectoryDataset> {
    let stats = standardized
        .standardization()
        .ok_or_else(|| Error::Argument("recovery expects a standardized dataset".into()))?;
    if raw.standardization().is_some() || raw.episode_lengths() != standardized.episode_lengths() {
        return Err(Error::Argument("raw dataset must be the unstandardized counterpart".into()));
    }
    let m = standardized.width();
    let h = half_width(params, m)?;
    let recovered: Vec<Vec<f64>> = split
        .corrupted
        .par_chunks(RECOVERY_CHUNK)
        .map(|chunk| {
            let slices = training::gather_slices(standardized, chunk, h);
            let mut rngs: Vec<ChaCha8Rng> = chunk
                .iter()
                .map(|&g| step_rng(cfg.seed, standardized.step_index(g)))
                .collect();
            let out = recover_batch_with(s, slices.view(), cfg, &mut rngs, |x, ks| params.predict(x, ks))?;
            Ok(out
                .rows()
                .into_iter()
                .flat_map(|r| r.iter().skip(h * m).take(m).copied().collect::<Vec<_>>())
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut out = raw.clone();
    let mut values = recovered.iter().flatten();
    for &g in &split.corrupted {
        let mut row = out.row_mut(raw.step_index(g));
        for (c, v) in row.iter_mut().enumerate() {
            let z = *values.next().expect("one column per flagged step");
            *v = stats.invert(c, z);
        }
    }
    if out.values().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("recovered dataset".into()));
    }
    Ok(out)
}
