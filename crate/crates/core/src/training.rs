//! Plumbing shared by the detector and denoiser training loops.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryDataset;
use crate::error::{Error, Result};

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

/// Loss curve plus instrumentation gathered during training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Step 0 holds the first batch loss; later points are window means.
    pub losses: Vec<LossPoint>,
    /// Smallest and largest diffusion step the predictor was evaluated at.
    pub min_k: Option<usize>,
    pub max_k: Option<usize>,
    /// Slices dropped because every column was masked.
    pub skipped_slices: usize,
}

impl TrainLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().map(|p| p.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().map(|p| p.loss)
    }

    pub(crate) fn observe_ks(&mut self, ks: &[usize]) {
        for &k in ks {
            self.min_k = Some(self.min_k.map_or(k, |m| m.min(k)));
            self.max_k = Some(self.max_k.map_or(k, |m| m.max(k)));
        }
    }
}

/// Accumulates per-step losses into logged window means.
pub(crate) struct LossTracker {
    every: usize,
    window_sum: f64,
    window_len: usize,
}

impl LossTracker {
    pub(crate) fn new(every: usize) -> Self {
        Self {
            every: every.max(1),
            window_sum: 0.0,
            window_len: 0,
        }
    }

    /// Record the loss of 0-based `step`; errors on divergence.
    pub(crate) fn record(&mut self, log: &mut TrainLog, step: usize, loss: f64, detail: impl FnOnce() -> String) -> Result<()> {
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                step,
                detail: format!("loss {loss}; {}", detail()),
            });
        }
        if step == 0 {
            log.losses.push(LossPoint { step: 0, loss });
        }
        self.window_sum += loss;
        self.window_len += 1;
        if (step + 1).is_multiple_of(self.every) {
            log.losses.push(LossPoint {
                step: step + 1,
                loss: self.window_sum / self.window_len as f64,
            });
            self.window_sum = 0.0;
            self.window_len = 0;
        }
        Ok(())
    }
}

pub(crate) fn require_standardized(d: &TrajectoryDataset) -> Result<()> {
    if d.standardization().is_none() {
        return Err(Error::Argument("training expects a standardized dataset".into()));
    }
    Ok(())
}

/// Gather the flattened slices centered at the given global step indices.
pub(crate) fn gather_slices(d: &TrajectoryDataset, centers: &[usize], h: usize) -> Array2<f64> {
    let dim = d.width() * (2 * h + 1);
    let mut out = Array2::zeros((centers.len(), dim));
    for (row, &g) in out.rows_mut().into_iter().zip(centers) {
        let mut row = row;
        d.write_slice_flat(d.step_index(g), h, row.as_slice_mut().expect("row-major"));
    }
    out
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

pub(crate) fn l2_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}
