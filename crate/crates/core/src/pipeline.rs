//! End-to-end recovery runs and the ablation drivers built on them.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::ambient::{train_detector_observed, AmbientTrainConfig};
use crate::data::{CorruptionMask, TrajectoryDataset};
use crate::denoise::{
    continue_joint, recover_dataset, train_denoiser, train_naive_detector_observed, DenoiserTrainConfig,
    RecoveryConfig, RecoveryMode,
};
use crate::detect::{score_dataset, DetectionMetrics, DetectionReport, RescaleMode, Split};
use crate::error::{Error, Result, StageExt};
use crate::nnet::PredictorParams;
use crate::schedule::{ScheduleConfig, VarianceSchedule};
use crate::training::{LossPoint, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub zeta: f64,
    pub rescale_mode: RescaleMode,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            zeta: 0.2,
            rescale_mode: RescaleMode::MinMax,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoverySection {
    pub mode: RecoveryMode,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub reports: Option<PathBuf>,
    /// Uncorrupted dataset, used only for reporting recovery error.
    pub ground_truth: Option<PathBuf>,
}

/// Every setting of a recovery run. The slice half-width and `k_a` come
/// from the `ambient` section and apply to all stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub ambient: AmbientTrainConfig,
    pub denoiser: DenoiserTrainConfig,
    pub detect: DetectConfig,
    pub recovery: RecoverySection,
    pub paths: PathsConfig,
    /// Continue training the detector jointly instead of fitting a separate
    /// denoiser.
    pub single_model: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<VarianceSchedule> {
        let s = self.schedule.build()?;
        self.ambient.validate(&s)?;
        self.denoiser_config().validate()?;
        if !(0.0..=1.0).contains(&self.detect.zeta) {
            return Err(Error::config("detect.zeta", format!("must lie in [0, 1], got {}", self.detect.zeta)));
        }
        Ok(s)
    }

    pub fn denoiser_config(&self) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            h: self.ambient.h,
            network: self.ambient.network.clone(),
            ..self.denoiser.clone()
        }
    }

    pub fn recovery_config(&self) -> RecoveryConfig {
        RecoveryConfig {
            mode: self.recovery.mode,
            k_a: self.ambient.k_a,
            seed: self.recovery.seed,
        }
    }
}

/// Squared error per entry in the standardized units of `stats_from`,
/// averaged over `steps` (all steps when `None`).
pub fn standardized_mse(
    a: &TrajectoryDataset,
    b: &TrajectoryDataset,
    stats_from: &TrajectoryDataset,
    steps: Option<&[usize]>,
) -> Result<f64> {
    let stats = stats_from
        .standardization()
        .ok_or_else(|| Error::Argument("reference dataset carries no standardization".into()))?;
    if a.episode_lengths() != b.episode_lengths() || a.width() != b.width() {
        return Err(Error::Argument("datasets differ in shape".into()));
    }
    let all: Vec<usize>;
    let steps = match steps {
        Some(s) => s,
        None => {
            all = (0..a.num_steps()).collect();
            &all
        }
    };
    if steps.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &g in steps {
        let at = a.step_index(g);
        for (c, (x, y)) in a.row(at).iter().zip(b.row(at).iter()).enumerate() {
            let d = (x - y) / stats.std[c];
            total += d * d;
        }
    }
    Ok(total / (steps.len() * a.width()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub corrupted: f64,
    pub recovered: f64,
    /// Restricted to steps that are corrupted and were flagged.
    pub corrupted_true_positive: Option<f64>,
    pub recovered_true_positive: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub zeta: f64,
    pub flagged: usize,
    pub kept: usize,
    pub metrics: Option<DetectionMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub steps: usize,
    pub detector_losses: Vec<LossPoint>,
    pub denoiser_losses: Vec<LossPoint>,
    pub detection: DetectionSummary,
    pub mse: Option<MseReport>,
}

/// Intermediate results handed out as each stage completes.
pub enum Artifact<'a> {
    Detector(&'a PredictorParams, &'a TrainLog),
    Detection(&'a DetectionReport),
    Denoiser(&'a PredictorParams, &'a TrainLog),
}

pub struct PipelineOutput {
    pub recovered: TrajectoryDataset,
    pub report: RunReport,
    pub detector: PredictorParams,
    pub detection: DetectionReport,
    pub denoiser: PredictorParams,
}

/// Inputs shared by every stage of a run.
pub struct RunInputs<'a> {
    pub corrupted: &'a TrajectoryDataset,
    pub mask: Option<&'a CorruptionMask>,
    pub ground_truth: Option<&'a TrajectoryDataset>,
}

/// Train the detector, split at `zeta`, train the denoiser on the kept
/// steps and rewrite the flagged ones.
pub fn run_pipeline(
    cfg: &RunConfig,
    inputs: &RunInputs<'_>,
    on_artifact: &mut dyn FnMut(Artifact<'_>) -> Result<()>,
) -> Result<PipelineOutput> {
    run_pipeline_with_detector(cfg, inputs, None, on_artifact)
}

/// As [`run_pipeline`], reusing an already trained detector when given.
pub fn run_pipeline_with_detector(
    cfg: &RunConfig,
    inputs: &RunInputs<'_>,
    detector: Option<(PredictorParams, TrainLog)>,
    on_artifact: &mut dyn FnMut(Artifact<'_>) -> Result<()>,
) -> Result<PipelineOutput> {
    let s = cfg.validate().stage("config")?;
    if inputs.corrupted.standardization().is_some() {
        return Err(Error::Argument("pipeline input must be in raw units".into())).stage("load");
    }
    let standardized = inputs.corrupted.standardize();
    let (detector, detector_log) = match detector {
        Some(d) => d,
        None => train_detector_observed(&standardized, &s, &cfg.ambient, 0, &mut |_, _| Ok(()))
            .stage("train-detector")?,
    };
    on_artifact(Artifact::Detector(&detector, &detector_log)).stage("train-detector")?;

    let scores = score_dataset(&detector, &s, &standardized, cfg.ambient.k_a, cfg.ambient.h).stage("detect")?;
    let detection = DetectionReport::from_scores(
        scores,
        cfg.ambient.k_a,
        cfg.ambient.h,
        cfg.detect.zeta,
        cfg.detect.rescale_mode,
        inputs.mask,
    )
    .stage("detect")?;
    on_artifact(Artifact::Detection(&detection)).stage("detect")?;

    let split = detection.split();
    let (denoiser, denoiser_log) = denoise_stage(cfg, &s, &standardized, &split, &detector)?;
    on_artifact(Artifact::Denoiser(&denoiser, &denoiser_log)).stage("train-denoiser")?;

    let recovered = recover_dataset(
        &standardized,
        inputs.corrupted,
        &split,
        &denoiser,
        &s,
        &cfg.recovery_config(),
    )
    .stage("recover")?;

    let mse = inputs
        .ground_truth
        .map(|truth| mse_report(inputs.corrupted, &recovered, truth, &standardized, inputs.mask, &split))
        .transpose()
        .stage("report")?;
    let report = RunReport {
        config: cfg.clone(),
        steps: standardized.num_steps(),
        detector_losses: detector_log.losses,
        denoiser_losses: denoiser_log.losses,
        detection: DetectionSummary {
            zeta: cfg.detect.zeta,
            flagged: split.corrupted.len(),
            kept: split.clean.len(),
            metrics: detection.metrics,
        },
        mse,
    };
    Ok(PipelineOutput {
        recovered,
        report,
        detector,
        detection,
        denoiser,
    })
}

fn denoise_stage(
    cfg: &RunConfig,
    s: &VarianceSchedule,
    standardized: &TrajectoryDataset,
    split: &Split,
    detector: &PredictorParams,
) -> Result<(PredictorParams, TrainLog)> {
    let dcfg = cfg.denoiser_config();
    if split.corrupted.is_empty() {
        // Nothing to recover; skip the training cost.
        return Ok((detector.clone(), TrainLog::default()));
    }
    if cfg.single_model {
        continue_joint(detector.clone(), standardized, split, s, &dcfg, cfg.ambient.k_a)
    } else {
        train_denoiser(standardized, split, s, &dcfg)
    }
    .stage("train-denoiser")
}

fn mse_report(
    corrupted: &TrajectoryDataset,
    recovered: &TrajectoryDataset,
    truth: &TrajectoryDataset,
    standardized: &TrajectoryDataset,
    mask: Option<&CorruptionMask>,
    split: &Split,
) -> Result<MseReport> {
    let tp: Option<Vec<usize>> = mask.map(|m| {
        split
            .corrupted
            .iter()
            .copied()
            .filter(|&g| m.flags()[g])
            .collect()
    });
    let on_tp = |d: &TrajectoryDataset| -> Result<Option<f64>> {
        tp.as_deref()
            .map(|steps| standardized_mse(d, truth, standardized, Some(steps)))
            .transpose()
    };
    Ok(MseReport {
        corrupted: standardized_mse(corrupted, truth, standardized, None)?,
        recovered: standardized_mse(recovered, truth, standardized, None)?,
        corrupted_true_positive: on_tp(corrupted)?,
        recovered_true_positive: on_tp(recovered)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub zeta: f64,
    pub fn_rate: f64,
    pub fp_rate: f64,
    pub mse: f64,
    pub flagged: usize,
}

/// Re-threshold a fixed detector at `zeta`, train a denoiser on the kept
/// steps and measure recovery error against `truth`.
pub fn evaluate_zeta(
    cfg: &RunConfig,
    corrupted: &TrajectoryDataset,
    mask: &CorruptionMask,
    truth: &TrajectoryDataset,
    detection: &DetectionReport,
    detector: &PredictorParams,
    zeta: f64,
) -> Result<(SweepRow, TrajectoryDataset)> {
    let s = cfg.validate()?;
    let standardized = corrupted.standardize();
    let at = detection.with_zeta(zeta, Some(mask))?;
    let metrics = at.metrics.ok_or(Error::MetricsUnavailable)?;
    let split = at.split();
    let mut run = cfg.clone();
    run.detect.zeta = zeta;
    let (denoiser, _) = denoise_stage(&run, &s, &standardized, &split, detector)?;
    let recovered = recover_dataset(&standardized, corrupted, &split, &denoiser, &s, &run.recovery_config())
        .stage("recover")?;
    let row = SweepRow {
        zeta,
        fn_rate: metrics.fn_rate,
        fp_rate: metrics.fp_rate,
        mse: standardized_mse(&recovered, truth, &standardized, None)?,
        flagged: split.corrupted.len(),
    };
    Ok((row, recovered))
}

/// Train one detector and evaluate recovery at every `zeta`.
pub fn sweep_zeta(
    cfg: &RunConfig,
    corrupted: &TrajectoryDataset,
    mask: &CorruptionMask,
    truth: &TrajectoryDataset,
    zetas: &[f64],
) -> Result<Vec<SweepRow>> {
    let s = cfg.validate()?;
    let standardized = corrupted.standardize();
    let (detector, _) = train_detector_observed(&standardized, &s, &cfg.ambient, 0, &mut |_, _| Ok(()))
        .stage("train-detector")?;
    let scores = score_dataset(&detector, &s, &standardized, cfg.ambient.k_a, cfg.ambient.h)?;
    let detection = DetectionReport::from_scores(
        scores,
        cfg.ambient.k_a,
        cfg.ambient.h,
        cfg.detect.zeta,
        cfg.detect.rescale_mode,
        Some(mask),
    )?;
    zetas
        .iter()
        .map(|&z| evaluate_zeta(cfg, corrupted, mask, truth, &detection, &detector, z).map(|(row, _)| row))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub fn_rate: f64,
    pub fp_rate: f64,
}

/// False-negative rate of one detector over the course of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnCurve {
    /// `ambient-k{k_a}` or `naive`.
    pub label: String,
    pub k_a: usize,
    pub points: Vec<CurvePoint>,
}

impl FnCurve {
    pub fn final_fn(&self) -> Option<f64> {
        self.points.last().map(|p| p.fn_rate)
    }

    /// The curve climbs back above its minimum after reaching it.
    pub fn rises_after_minimum(&self) -> bool {
        let Some(final_fn) = self.final_fn() else {
            return false;
        };
        let min = self.points.iter().map(|p| p.fn_rate).fold(f64::INFINITY, f64::min);
        final_fn > min
    }
}

/// A trained detector together with its evaluation curve.
pub struct ComparedDetector {
    pub curve: FnCurve,
    pub params: PredictorParams,
    pub log: TrainLog,
}

/// Train an ambient detector for every `k_a` (and optionally the naive
/// baseline, scored at the configured `k_a`), recording detection error at
/// `cfg.detect.zeta` every `eval_every` updates.
pub fn compare_detectors(
    cfg: &RunConfig,
    corrupted: &TrajectoryDataset,
    mask: &CorruptionMask,
    k_a_list: &[usize],
    include_naive: bool,
    eval_every: usize,
) -> Result<Vec<ComparedDetector>> {
    let s = cfg.validate()?;
    if eval_every == 0 {
        return Err(Error::config("eval_every", "must be positive"));
    }
    let standardized = corrupted.standardize();
    let mut out = Vec::new();
    let evaluate = |k_a: usize, points: &mut Vec<CurvePoint>, step: usize, p: &PredictorParams| -> Result<()> {
        let scores = score_dataset(p, &s, &standardized, k_a, cfg.ambient.h)?;
        let r = DetectionReport::from_scores(
            scores,
            k_a,
            cfg.ambient.h,
            cfg.detect.zeta,
            cfg.detect.rescale_mode,
            Some(mask),
        )?;
        let m = r.metrics.ok_or(Error::MetricsUnavailable)?;
        points.push(CurvePoint {
            step,
            fn_rate: m.fn_rate,
            fp_rate: m.fp_rate,
        });
        Ok(())
    };
    for &k_a in k_a_list {
        let ambient = AmbientTrainConfig {
            k_a,
            ..cfg.ambient.clone()
        };
        let mut points = Vec::new();
        let (params, log) = train_detector_observed(&standardized, &s, &ambient, eval_every, &mut |step, p| {
            evaluate(k_a, &mut points, step, p)
        })
        .stage("train-detector")?;
        out.push(ComparedDetector {
            curve: FnCurve {
                label: format!("ambient-k{k_a}"),
                k_a,
                points,
            },
            params,
            log,
        });
    }
    if include_naive {
        let k_a = cfg.ambient.k_a;
        let mut points = Vec::new();
        let (params, log) = train_naive_detector_observed(&standardized, &s, &cfg.ambient, eval_every, &mut |step, p| {
            evaluate(k_a, &mut points, step, p)
        })
        .stage("train-naive-detector")?;
        out.push(ComparedDetector {
            curve: FnCurve {
                label: "naive".into(),
                k_a,
                points,
            },
            params,
            log,
        });
    }
    Ok(out)
}
