//! Corruption detection from the detector's predicted-noise energy.
//!
//! A step's raw score is the squared norm of the center column of
//! `eps(sqrt(ab_{k_a}) * slice, k_a)`. Scores are rescaled to `[0, 1]` over
//! the dataset and thresholded: `rescaled > zeta` marks a step corrupted.

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CorruptionMask, SliceWindow, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::nnet::PredictorParams;
use crate::schedule::VarianceSchedule;
use crate::training;

/// Steps scored per batched forward pass. Fixed so results do not depend
/// on how work is spread across threads.
pub const SCORE_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    /// Dataset-global min-max.
    #[default]
    MinMax,
    /// Min to 99.9th percentile, clamped to 1 above it.
    Clipped,
}

fn check_width(params: &PredictorParams, channels: usize, h: usize) -> Result<()> {
    let expected = channels * (2 * h + 1);
    if params.input_dim() != expected {
        return Err(Error::Argument(format!(
            "slice half-width {h} gives {expected} inputs but the checkpoint expects {}",
            params.input_dim()
        )));
    }
    Ok(())
}

/// Squared norm of the predicted noise in the center column of one slice.
pub fn score_sample(
    params: &PredictorParams,
    s: &VarianceSchedule,
    slice: &SliceWindow,
    k_a: usize,
) -> Result<f64> {
    let m = slice.values.nrows();
    check_width(params, m, slice.h)?;
    let scale = s.alpha_bar(k_a).sqrt();
    let flat: Vec<f64> = slice.flatten().into_iter().map(|v| v * scale).collect();
    let x = ndarray::ArrayView2::from_shape((1, flat.len()), &flat)
        .map_err(|e| Error::Internal(e.to_string()))?;
    let out = params.predict(x, &[k_a])?;
    let center = slice.h * m;
    Ok(out.row(0).iter().skip(center).take(m).map(|v| v * v).sum())
}

/// Score every step of a standardized dataset, in global step order.
pub fn score_dataset(
    params: &PredictorParams,
    s: &VarianceSchedule,
    d: &TrajectoryDataset,
    k_a: usize,
    h: usize,
) -> Result<Vec<f64>> {
    let m = d.width();
    check_width(params, m, h)?;
    let scale = s.alpha_bar(k_a).sqrt();
    let all: Vec<usize> = (0..d.num_steps()).collect();
    let chunks: Vec<Vec<f64>> = all
        .par_chunks(SCORE_CHUNK)
        .map(|centers| {
            let mut x = training::gather_slices(d, centers, h);
            x *= scale;
            let out = params.predict(x.view(), &vec![k_a; centers.len()])?;
            Ok(out
                .axis_iter(Axis(0))
                .map(|row| row.iter().skip(h * m).take(m).map(|v| v * v).sum())
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

pub fn rescale_scores(scores: &[f64], mode: RescaleMode) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Argument("cannot rescale an empty score vector".into()));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let top = match mode {
        RescaleMode::MinMax => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        RescaleMode::Clipped => {
            let mut sorted = scores.to_vec();
            sorted.sort_by(f64::total_cmp);
            let rank = ((0.999 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            sorted[rank - 1]
        }
    };
    if top <= min {
        return Ok(vec![0.0; scores.len()]);
    }
    Ok(scores
        .iter()
        .map(|&e| ((e - min) / (top - min)).min(1.0))
        .collect())
}

/// Partition of global step indices into detected-clean and
/// detected-corrupted sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub zeta: f64,
    pub clean: Vec<usize>,
    pub corrupted: Vec<usize>,
    /// `true` where the step is considered clean.
    pub indicator: Vec<bool>,
}

pub fn classify_and_split(rescaled: &[f64], zeta: f64) -> Result<Split> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::config("detect.zeta", format!("must lie in [0, 1], got {zeta}")));
    }
    let indicator: Vec<bool> = rescaled.iter().map(|&e| e <= zeta).collect();
    let (clean, corrupted): (Vec<usize>, Vec<usize>) =
        (0..rescaled.len()).partition(|&i| indicator[i]);
    Ok(Split {
        zeta,
        clean,
        corrupted,
        indicator,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub fn_rate: f64,
    pub fp_rate: f64,
    pub auc: f64,
    pub mean_e_clean: f64,
    pub mean_e_corrupted: f64,
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let pos = positive.iter().filter(|p| **p).count() as f64;
    let neg = positive.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

/// Compare predicted labels (`true` = corrupted) against the ground truth.
pub fn detection_metrics(
    predicted_corrupted: &[bool],
    scores: &[f64],
    mask: Option<&CorruptionMask>,
) -> Result<DetectionMetrics> {
    let mask = mask.ok_or(Error::MetricsUnavailable)?;
    let truth = mask.flags();
    if truth.len() != predicted_corrupted.len() || truth.len() != scores.len() {
        return Err(Error::Argument("labels, scores and mask differ in length".into()));
    }
    let mut fn_count = 0usize;
    let mut fp_count = 0usize;
    let (mut sum_c, mut sum_n) = (0.0, 0.0);
    for ((&pred, &actual), &e) in predicted_corrupted.iter().zip(truth).zip(scores) {
        if actual {
            sum_c += e;
            fn_count += !pred as usize;
        } else {
            sum_n += e;
            fp_count += pred as usize;
        }
    }
    let corrupted = truth.iter().filter(|f| **f).count();
    let clean = truth.len() - corrupted;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(DetectionMetrics {
        fn_rate: ratio(fn_count, corrupted),
        fp_rate: ratio(fp_count, clean),
        auc: auc(scores, truth),
        mean_e_clean: mean(sum_n, clean),
        mean_e_corrupted: mean(sum_c, corrupted),
    })
}

/// Scores, labels and (when ground truth is available) metrics for one
/// dataset at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub k_a: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub zeta: f64,
    pub rescale_mode: RescaleMode,
    pub scores: Vec<f64>,
    pub rescaled: Vec<f64>,
    /// `true` where the step is classified corrupted.
    pub labels: Vec<bool>,
    pub metrics: Option<DetectionMetrics>,
}

impl DetectionReport {
    pub fn from_scores(
        scores: Vec<f64>,
        k_a: usize,
        h: usize,
        zeta: f64,
        rescale_mode: RescaleMode,
        mask: Option<&CorruptionMask>,
    ) -> Result<Self> {
        let rescaled = rescale_scores(&scores, rescale_mode)?;
        let split = classify_and_split(&rescaled, zeta)?;
        let labels: Vec<bool> = split.indicator.iter().map(|c| !c).collect();
        let metrics = mask
            .map(|m| detection_metrics(&labels, &scores, Some(m)))
            .transpose()?;
        Ok(Self {
            k_a,
            h,
            zeta,
            rescale_mode,
            scores,
            rescaled,
            labels,
            metrics,
        })
    }

    pub fn split(&self) -> Split {
        classify_and_split(&self.rescaled, self.zeta).expect("zeta validated at construction")
    }

    /// Re-threshold the same scores.
    pub fn with_zeta(&self, zeta: f64, mask: Option<&CorruptionMask>) -> Result<Self> {
        Self::from_scores(self.scores.clone(), self.k_a, self.h, zeta, self.rescale_mode, mask)
    }
}

/// Score a standardized dataset and classify it at `zeta`.
pub fn detect(
    params: &PredictorParams,
    s: &VarianceSchedule,
    d: &TrajectoryDataset,
    k_a: usize,
    h: usize,
    zeta: f64,
    rescale_mode: RescaleMode,
    mask: Option<&CorruptionMask>,
) -> Result<DetectionReport> {
    let scores = score_dataset(params, s, d, k_a, h)?;
    DetectionReport::from_scores(scores, k_a, h, zeta, rescale_mode, mask)
}
