//! Detector training with the ambient diffusion objective.
//!
//! Each training slice is first forward-noised to the ambient level `k_a`
//! (the regression target) and then carried to a higher level `k > k_a`
//! through the bridge `x^k | x^{k_a}` (the network input). The predictor is
//! trained so that `a(k) x^k - b(k) eps(x^k, k)` reproduces `x^{k_a}`; its
//! minimizer is the conditional expectation of the total noise, and the
//! predictor is never queried at `k <= k_a`.

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::nnet::{init_predictor, train_step, Gradients, Mode, NetworkShape, PredictorConfig, PredictorParams};
use crate::schedule::VarianceSchedule;
use crate::training::{self, LossTracker, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmbientTrainConfig {
    pub k_a: usize,
    /// Slice half-width `H`.
    #[serde(rename = "H")]
    pub h: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
    pub network: NetworkShape,
}

impl Default for AmbientTrainConfig {
    fn default() -> Self {
        Self {
            k_a: 30,
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

impl AmbientTrainConfig {
    pub fn validate(&self, s: &VarianceSchedule) -> Result<()> {
        if self.k_a == 0 || self.k_a >= s.steps() {
            return Err(Error::config(
                "ambient.k_a",
                format!("must satisfy 1 <= k_a < K = {}, got {}", s.steps(), self.k_a),
            ));
        }
        if self.batch == 0 {
            return Err(Error::config("ambient.batch", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("ambient.lr", "must be positive"));
        }
        Ok(())
    }
}

/// A batch of (input, target) pairs at per-row diffusion steps.
#[derive(Debug, Clone)]
pub struct AmbientBatch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub ks: Vec<usize>,
}

/// Deterministic pair construction from explicit noise draws:
/// `target = sqrt(ab_a) x + sqrt(1 - ab_a) eps1`,
/// `input = signal * target + noise * eps2`.
pub fn ambient_pair_from_noise(
    s: &VarianceSchedule,
    slice: &[f64],
    k_a: usize,
    k: usize,
    eps1: &[f64],
    eps2: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if k <= k_a {
        return Err(Error::Argument(format!("ambient pairs need k > k_a, got k={k}, k_a={k_a}")));
    }
    let bridge = s.bridge_coefficients(k_a, k)?;
    let ab = s.alpha_bar(k_a);
    let (sig, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let target: Vec<f64> = slice.iter().zip(eps1).map(|(x, e)| sig * x + noise * e).collect();
    let input = target
        .iter()
        .zip(eps2)
        .map(|(t, e)| bridge.signal * t + bridge.noise * e)
        .collect();
    Ok((target, input))
}

pub fn sample_ambient_pair<R: Rng + ?Sized>(
    s: &VarianceSchedule,
    slice: &[f64],
    k_a: usize,
    k: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = slice.len();
    let eps = training::standard_normal(rng, (2, n));
    let (e1, e2) = (eps.row(0), eps.row(1));
    ambient_pair_from_noise(s, slice, k_a, k, e1.as_slice().unwrap(), e2.as_slice().unwrap())
}

/// Noise a batch of flattened clean slices into ambient pairs, drawing one
/// `k` per row uniformly from `k_a + 1..=K`.
pub fn sample_ambient_batch<R: Rng + ?Sized>(
    s: &VarianceSchedule,
    slices: ArrayView2<f64>,
    k_a: usize,
    rng: &mut R,
) -> Result<AmbientBatch> {
    if k_a == 0 || k_a >= s.steps() {
        return Err(Error::Argument(format!("k_a = {k_a} leaves no diffusion steps above it")));
    }
    let (rows, cols) = slices.dim();
    let ks: Vec<usize> = (0..rows).map(|_| rng.random_range(k_a + 1..=s.steps())).collect();
    let eps1 = training::standard_normal(rng, (rows, cols));
    let eps2 = training::standard_normal(rng, (rows, cols));
    let ab = s.alpha_bar(k_a);
    let (sig, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut targets = Array2::zeros((rows, cols));
    Zip::from(&mut targets)
        .and(&slices)
        .and(&eps1)
        .for_each(|t, &x, &e| *t = sig * x + noise * e);
    let mut inputs = Array2::zeros((rows, cols));
    for (i, &k) in ks.iter().enumerate() {
        let bridge = s.bridge_coefficients(k_a, k)?;
        Zip::from(inputs.row_mut(i))
            .and(targets.row(i))
            .and(eps2.row(i))
            .for_each(|x, &t, &e| *x = bridge.signal * t + bridge.noise * e);
    }
    Ok(AmbientBatch { inputs, targets, ks })
}

/// Mean squared ambient residual for given predictions, and its gradient
/// with respect to the predictions.
pub fn ambient_residual_loss(
    s: &VarianceSchedule,
    k_a: usize,
    batch: &AmbientBatch,
    predictions: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    let (rows, cols) = batch.inputs.dim();
    let scale = 1.0 / (rows * cols) as f64;
    let mut d_pred = Array2::zeros((rows, cols));
    let mut total = 0.0;
    for (i, &k) in batch.ks.iter().enumerate() {
        let c = s.ambient_coefficients(k_a, k)?;
        Zip::from(d_pred.row_mut(i))
            .and(batch.inputs.row(i))
            .and(predictions.row(i))
            .and(batch.targets.row(i))
            .for_each(|g, &x, &p, &t| {
                let r = c.a * x - c.b * p - t;
                total += r * r;
                *g = -2.0 * c.b * r * scale;
            });
    }
    Ok((total * scale, d_pred))
}

/// Loss and parameter gradients of the ambient objective on a prepared batch.
pub fn ambient_loss_on<R: Rng + ?Sized>(
    params: &PredictorParams,
    s: &VarianceSchedule,
    k_a: usize,
    batch: &AmbientBatch,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    if batch.ks.iter().any(|&k| k <= k_a) {
        return Err(Error::Argument("ambient loss is only defined for k > k_a".into()));
    }
    let (pred, cache) = params.forward(batch.inputs.view(), &batch.ks, mode, rng)?;
    let (loss, d_pred) = ambient_residual_loss(s, k_a, batch, &pred)?;
    Ok((loss, params.backward(&cache, &d_pred)))
}

/// Sample noise and diffusion steps for `slices` and evaluate the ambient
/// loss in training mode.
pub fn ambient_loss<R: Rng + ?Sized>(
    s: &VarianceSchedule,
    params: &PredictorParams,
    slices: ArrayView2<f64>,
    k_a: usize,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let batch = sample_ambient_batch(s, slices, k_a, rng)?;
    ambient_loss_on(params, s, k_a, &batch, Mode::Train, rng)
}

pub fn detector_config(d: &TrajectoryDataset, cfg: &AmbientTrainConfig) -> PredictorConfig {
    PredictorConfig::for_slice(d.width(), cfg.h, &cfg.network, cfg.seed)
}

pub fn train_detector(
    d: &TrajectoryDataset,
    s: &VarianceSchedule,
    cfg: &AmbientTrainConfig,
) -> Result<(PredictorParams, TrainLog)> {
    train_detector_observed(d, s, cfg, 0, &mut |_, _| Ok(()))
}

/// As [`train_detector`], calling `observer(step, params)` after every
/// `every` updates (never when `every == 0`).
pub fn train_detector_observed(
    d: &TrajectoryDataset,
    s: &VarianceSchedule,
    cfg: &AmbientTrainConfig,
    every: usize,
    observer: &mut dyn FnMut(usize, &PredictorParams) -> Result<()>,
) -> Result<(PredictorParams, TrainLog)> {
    training::require_standardized(d)?;
    cfg.validate(s)?;
    let mut params = init_predictor(detector_config(d, cfg))?;
    let mut log = TrainLog::default();
    let mut tracker = LossTracker::new(cfg.log_every);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA3B1_E7D2_0000_0001);
    let n = d.num_steps();
    for step in 0..cfg.steps {
        let centers: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..n)).collect();
        let slices = training::gather_slices(d, &centers, cfg.h);
        let batch = sample_ambient_batch(s, slices.view(), cfg.k_a, &mut rng)?;
        log.observe_ks(&batch.ks);
        let (loss, grads) = ambient_loss_on(&params, s, cfg.k_a, &batch, Mode::Train, &mut rng)?;
        tracker.record(&mut log, step, loss, || {
            format!(
                "k range {:?}..{:?}, input norm {:.3e}, target norm {:.3e}",
                batch.ks.iter().min(),
                batch.ks.iter().max(),
                training::l2_norm(&batch.inputs),
                training::l2_norm(&batch.targets)
            )
        })?;
        train_step(&mut params, &grads, cfg.lr)?;
        if every > 0 && (step + 1) % every == 0 {
            observer(step + 1, &params)?;
        }
    }
    Ok((params, log))
}
