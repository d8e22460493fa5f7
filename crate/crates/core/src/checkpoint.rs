//! Predictor checkpoint files.
//!
//! A checkpoint is one JSON header line followed by the parameters as
//! little-endian `f32`: for each layer in order, the `fan_in x fan_out`
//! weight matrix row-major, then the bias. Optimizer moments are not stored,
//! so training resumed from a file restarts Adam.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, LoadError, Result};
use crate::nnet::{Dense, PredictorConfig, PredictorParams};
use crate::schedule::ScheduleConfig;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Detector,
    Denoiser,
}

/// What a checkpoint was trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub k_a: Option<usize>,
    #[serde(rename = "H")]
    pub h: usize,
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: PredictorConfig,
    step: u64,
    meta: Option<CheckpointMeta>,
}

pub fn write_checkpoint<W: Write>(p: &PredictorParams, meta: Option<&CheckpointMeta>, mut w: W) -> Result<()> {
    let header = Header {
        version: FORMAT_VERSION,
        config: p.config().clone(),
        step: p.step(),
        meta: meta.cloned(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut payload = Vec::new();
    for layer in &p.layers {
        for v in layer.weight.iter().chain(layer.bias.iter()) {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(PredictorParams, Option<CheckpointMeta>)> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(LoadError::MalformedHeader("missing header line".into()).into());
    }
    let header: Header =
        serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| LoadError::MalformedHeader(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(LoadError::UnsupportedVersion(header.version).into());
    }
    header
        .config
        .validate()
        .map_err(|e| LoadError::ShapeMismatch(e.to_string()))?;
    let shapes = header.config.layer_shapes();
    let expected: usize = shapes.iter().map(|&(i, o)| 4 * (i * o + o)).sum();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(LoadError::PayloadLength {
            expected,
            found: payload.len(),
        }
        .into());
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let layers = shapes
        .iter()
        .map(|&(i, o)| Dense {
            weight: Array2::from_shape_simple_fn((i, o), || values.next().unwrap()),
            bias: Array1::from_shape_simple_fn(o, || values.next().unwrap()),
        })
        .collect();
    let params = PredictorParams::from_layers(header.config, layers, header.step)?;
    if !params.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok((params, header.meta))
}

pub fn save_checkpoint(p: &PredictorParams, meta: Option<&CheckpointMeta>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(p, meta, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PredictorParams, Option<CheckpointMeta>)> {
    read_checkpoint(File::open(path)?)
}
