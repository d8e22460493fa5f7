use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use adg_core::ambient::train_detector;
use adg_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelKind};
use adg_core::corrupt::apply;
use adg_core::data::{self, generate_synthetic, CorruptionMask};
use adg_core::denoise::{recover_dataset, train_denoiser, RecoveryMode};
use adg_core::detect::{detect, DetectionReport};
use adg_core::pipeline::{compare_detectors, run_pipeline, sweep_zeta, Artifact, RunInputs};
use adg_core::theory::{min_ambient_timestep, tradeoff_table};
use adg_core::{
    ChannelLayout, CorruptionFamily, CorruptionSpec, Error, LossPoint, RunConfig, SyntheticKind,
    SyntheticSpec, TrajectoryDataset,
};
use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::{Cli, Command, Family, Kind, Mode};

/// Problems with the configuration file or flags.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// 2 for configuration errors, 3 for data errors, 4 for divergence.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    if let Some(err) = e.downcast_ref::<Error>() {
        return match err.root() {
            Error::Config { .. } => 2,
            Error::Divergence { .. } => 4,
            Error::Internal(_) => 1,
            _ => 3,
        };
    }
    if e.downcast_ref::<std::io::Error>().is_some() || e.downcast_ref::<csv::Error>().is_some() {
        return 3;
    }
    1
}

struct RunContext {
    cfg: RunConfig,
    out_dir: PathBuf,
}

impl RunContext {
    fn output(&self, path: &Path) -> Result<PathBuf> {
        let full = if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.out_dir.join(path)
        };
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(full)
    }

    fn schedule(&self) -> Result<adg_core::VarianceSchedule> {
        Ok(self.cfg.validate()?)
    }

    fn meta(&self, kind: ModelKind) -> CheckpointMeta {
        CheckpointMeta {
            kind,
            k_a: Some(self.cfg.ambient.k_a),
            h: self.cfg.ambient.h,
            schedule: self.cfg.schedule,
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| ConfigError(format!("reading {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| ConfigError(format!("parsing {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.ambient.seed = seed;
        cfg.denoiser.seed = seed;
        cfg.recovery.seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(ConfigError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = RunContext {
        cfg: load_config(cli.config.as_deref(), cli.seed)?,
        out_dir: cli.out_dir.clone(),
    };
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Gen {
            kind,
            episodes,
            length,
            state_dim,
            action_dim,
            reward_dim,
            amplitude,
            out,
            csv,
        } => {
            let layout = ChannelLayout::new(state_dim, action_dim, reward_dim)?;
            let spec = SyntheticSpec {
                kind: match kind {
                    Kind::Oscillator => SyntheticKind::Oscillator,
                    Kind::Lissajous => SyntheticKind::Lissajous,
                    Kind::PiecewiseRamp => SyntheticKind::PiecewiseRamp,
                },
                episodes,
                length,
                layout,
                amplitude,
                seed,
                ..SyntheticSpec::benchmark(seed)
            };
            let d = generate_synthetic(&spec)?;
            data::save(&d, None, ctx.output(&out)?)?;
            if let Some(path) = csv {
                data::write_csv(&d, File::create(ctx.output(&path)?)?)?;
            }
            log::info!("wrote {} episodes, {} steps", d.num_episodes(), d.num_steps());
        }
        Command::Corrupt {
            input,
            family,
            rate,
            scale,
            out,
        } => {
            let (d, _) = data::load(&input)?;
            if d.standardization().is_some() {
                bail!(Error::Argument("corrupt expects a raw dataset".into()));
            }
            let family = match family {
                Family::UniformState => CorruptionFamily::UniformState,
                Family::UniformFullElement => CorruptionFamily::UniformFullElement,
                Family::GaussianState => CorruptionFamily::GaussianState,
                Family::MissingZeroActions => CorruptionFamily::MissingZeroActions,
            };
            let (corrupted, mask) = apply(&d, &CorruptionSpec::new(family, rate, scale, seed))?;
            data::save(&corrupted, Some(&mask), ctx.output(&out)?)?;
            log::info!("corrupted {} of {} steps", mask.count(), mask.len());
        }
        Command::TrainDetector {
            input,
            out_checkpoint,
            log,
        } => {
            let s = ctx.schedule()?;
            let (d, _) = data::load(&input)?;
            let (params, train_log) = train_detector(&raw(d)?.standardize(), &s, &ctx.cfg.ambient)?;
            save_checkpoint(&params, Some(&ctx.meta(ModelKind::Detector)), ctx.output(&out_checkpoint)?)?;
            if let Some(path) = log {
                write_loss_log(&train_log.losses, &ctx.output(&path)?)?;
            }
        }
        Command::Detect {
            input,
            checkpoint,
            zeta,
            out_report,
        } => {
            let s = ctx.schedule()?;
            let (d, mask) = data::load(&input)?;
            let (params, meta) = load_checkpoint(&checkpoint)?;
            check_meta(&ctx, meta.as_ref())?;
            let zeta = zeta.unwrap_or(ctx.cfg.detect.zeta);
            let report = detect(
                &params,
                &s,
                &raw(d)?.standardize(),
                ctx.cfg.ambient.k_a,
                ctx.cfg.ambient.h,
                zeta,
                ctx.cfg.detect.rescale_mode,
                mask.as_ref(),
            )?;
            let flagged = report.labels.iter().filter(|l| **l).count();
            log::info!("flagged {flagged} of {} steps at zeta = {zeta}", report.labels.len());
            if let Some(m) = &report.metrics {
                log::info!("fn {:.4} fp {:.4} auc {:.4}", m.fn_rate, m.fp_rate, m.auc);
            }
            write_json(&report, &ctx.output(&out_report)?)?;
        }
        Command::TrainDenoiser {
            input,
            report,
            out_checkpoint,
            log,
        } => {
            let s = ctx.schedule()?;
            let (d, _) = data::load(&input)?;
            let d = raw(d)?.standardize();
            let report = read_report(&report, &d)?;
            let (params, train_log) = train_denoiser(&d, &report.split(), &s, &ctx.cfg.denoiser_config())?;
            save_checkpoint(&params, Some(&ctx.meta(ModelKind::Denoiser)), ctx.output(&out_checkpoint)?)?;
            if let Some(path) = log {
                write_loss_log(&train_log.losses, &ctx.output(&path)?)?;
            }
        }
        Command::Recover {
            input,
            report,
            checkpoint,
            mode,
            out,
        } => {
            let s = ctx.schedule()?;
            let (d, mask) = data::load(&input)?;
            let d = raw(d)?;
            let standardized = d.standardize();
            let report = read_report(&report, &standardized)?;
            let (params, meta) = load_checkpoint(&checkpoint)?;
            check_meta(&ctx, meta.as_ref())?;
            let mut rcfg = ctx.cfg.recovery_config();
            if let Some(mode) = mode {
                rcfg.mode = match mode {
                    Mode::SingleStep => RecoveryMode::SingleStep,
                    Mode::ReverseChain => RecoveryMode::ReverseChain,
                };
            }
            let recovered = recover_dataset(&standardized, &d, &report.split(), &params, &s, &rcfg)?;
            data::save(&recovered, mask.as_ref(), ctx.output(&out)?)?;
        }
        Command::Pipeline {
            input,
            out,
            report,
            ground_truth,
            single_model,
        } => pipeline(&ctx, input, out, report, ground_truth, single_model)?,
        Command::SweepZeta {
            input,
            ground_truth,
            zetas,
            out,
        } => {
            let (d, mask) = data::load(&input)?;
            let mask = require_mask(mask)?;
            let (truth, _) = data::load(&ground_truth)?;
            let rows = sweep_zeta(&ctx.cfg, &raw(d)?, &mask, &raw(truth)?, &zetas)?;
            write_csv_rows(&rows, &ctx.output(&out)?)?;
            for r in &rows {
                log::info!("zeta {:.2}: fn {:.4} fp {:.4} mse {:.5}", r.zeta, r.fn_rate, r.fp_rate, r.mse);
            }
        }
        Command::CompareDetectors {
            input,
            k_a,
            naive,
            eval_every,
            out,
        } => {
            let (d, mask) = data::load(&input)?;
            let mask = require_mask(mask)?;
            let compared = compare_detectors(&ctx.cfg, &raw(d)?, &mask, &k_a, naive, eval_every)?;
            #[derive(Serialize)]
            struct Row<'a> {
                detector: &'a str,
                k_a: usize,
                step: usize,
                fn_rate: f64,
                fp_rate: f64,
            }
            let mut w = csv::Writer::from_path(ctx.output(&out)?)?;
            for c in &compared {
                for p in &c.curve.points {
                    w.serialize(Row {
                        detector: &c.curve.label,
                        k_a: c.curve.k_a,
                        step: p.step,
                        fn_rate: p.fn_rate,
                        fp_rate: p.fp_rate,
                    })?;
                }
                log::info!("{}: final fn {:?}", c.curve.label, c.curve.final_fn());
            }
            w.flush()?;
        }
        Command::Theory {
            iota,
            sigma,
            m,
            n,
            c,
            out,
        } => {
            let s = ctx.schedule()?;
            let table = tradeoff_table(&s, iota, sigma, m, n)?;
            write_csv_rows(&table, &ctx.output(&out)?)?;
            match min_ambient_timestep(&s, iota, c, m, n) {
                Ok(k) => log::info!("smallest ambient step with gap below {c}: {k}"),
                Err(e) => log::warn!("{e}"),
            }
        }
    }
    Ok(())
}

fn pipeline(
    ctx: &RunContext,
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    report: Option<PathBuf>,
    ground_truth: Option<PathBuf>,
    single_model: bool,
) -> Result<()> {
    let paths = &ctx.cfg.paths;
    let input = input
        .or_else(|| paths.input.clone())
        .ok_or_else(|| ConfigError("no input dataset: pass --in or set paths.in".into()))?;
    let out = out
        .or_else(|| paths.out.clone())
        .ok_or_else(|| ConfigError("no output path: pass --out or set paths.out".into()))?;
    let report_path = report
        .or_else(|| paths.reports.clone())
        .unwrap_or_else(|| PathBuf::from("report.json"));
    let ground_truth = ground_truth.or_else(|| paths.ground_truth.clone());

    let mut cfg = ctx.cfg.clone();
    cfg.single_model |= single_model;
    let (d, mask) = data::load(&input)?;
    let d = raw(d)?;
    let truth = ground_truth.map(|p| data::load(&p).map(|(t, _)| t)).transpose()?;
    let truth = truth.map(raw).transpose()?;

    let scratch = ctx.output(Path::new("scratch/.keep"))?;
    let scratch = scratch.parent().expect("has parent").to_path_buf();
    let inputs = RunInputs {
        corrupted: &d,
        mask: mask.as_ref(),
        ground_truth: truth.as_ref(),
    };
    let output = run_pipeline(&cfg, &inputs, &mut |artifact| {
        match artifact {
            Artifact::Detector(p, _) => save_checkpoint(p, Some(&ctx.meta(ModelKind::Detector)), scratch.join("detector.ckpt")),
            Artifact::Detection(r) => {
                let f = BufWriter::new(File::create(scratch.join("detection.json"))?);
                serde_json::to_writer(f, r)?;
                Ok(())
            }
            Artifact::Denoiser(p, _) => save_checkpoint(p, Some(&ctx.meta(ModelKind::Denoiser)), scratch.join("denoiser.ckpt")),
        }
    })?;
    data::save(&output.recovered, mask.as_ref(), ctx.output(&out)?)?;
    write_json(&output.report, &ctx.output(&report_path)?)?;
    let det = &output.report.detection;
    log::info!("flagged {} of {} steps", det.flagged, det.flagged + det.kept);
    if let Some(m) = &output.report.mse {
        log::info!("mse corrupted {:.5} -> recovered {:.5}", m.corrupted, m.recovered);
    }
    Ok(())
}

fn raw(d: TrajectoryDataset) -> Result<TrajectoryDataset> {
    if d.standardization().is_some() {
        return Ok(d.destandardize()?);
    }
    Ok(d)
}

fn require_mask(mask: Option<CorruptionMask>) -> Result<CorruptionMask> {
    mask.ok_or_else(|| Error::MetricsUnavailable.into())
}

fn check_meta(ctx: &RunContext, meta: Option<&CheckpointMeta>) -> Result<()> {
    let Some(meta) = meta else { return Ok(()) };
    if meta.h != ctx.cfg.ambient.h {
        bail!(Error::Argument(format!(
            "checkpoint was trained with H = {} but the configuration has H = {}",
            meta.h, ctx.cfg.ambient.h
        )));
    }
    if meta.schedule != ctx.cfg.schedule {
        bail!(Error::Argument("checkpoint was trained with a different schedule".into()));
    }
    Ok(())
}

fn read_report(path: &Path, d: &TrajectoryDataset) -> Result<DetectionReport> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let report: DetectionReport = serde_json::from_reader(std::io::BufReader::new(f)).map_err(Error::from)?;
    if report.labels.len() != d.num_steps() || report.rescaled.len() != d.num_steps() {
        bail!(Error::Argument(format!(
            "report covers {} steps but the dataset has {}",
            report.labels.len(),
            d.num_steps()
        )));
    }
    Ok(report)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_loss_log(losses: &[LossPoint], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in losses {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_csv_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
