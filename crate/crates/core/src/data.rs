//! Trajectory datasets: layout, synthetic generation, standardization,
//! slice extraction and persistence.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayViewMut1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LoadError, Result};

const FORMAT_VERSION: u32 = 1;
const MIN_STD: f64 = 1e-8;

/// Channel layout of a step vector `z = (s, a, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    #[serde(rename = "d_s")]
    pub state_dim: usize,
    #[serde(rename = "d_a")]
    pub action_dim: usize,
    pub reward_dim: usize,
}

impl ChannelLayout {
    pub fn new(state_dim: usize, action_dim: usize, reward_dim: usize) -> Result<Self> {
        let layout = Self {
            state_dim,
            action_dim,
            reward_dim,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::config("layout.d_s", "at least one state dimension is required"));
        }
        if self.reward_dim > 1 {
            return Err(Error::config("layout.reward_dim", "must be 0 or 1"));
        }
        Ok(())
    }

    /// Total channel count `M`.
    pub fn width(&self) -> usize {
        self.state_dim + self.action_dim + self.reward_dim
    }

    pub fn states(&self) -> std::ops::Range<usize> {
        0..self.state_dim
    }

    pub fn actions(&self) -> std::ops::Range<usize> {
        self.state_dim..self.state_dim + self.action_dim
    }

    pub fn reward(&self) -> Option<usize> {
        (self.reward_dim == 1).then_some(self.state_dim + self.action_dim)
    }
}

/// Channel subsets for per-dimension statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSelect {
    State,
    Action,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, c: usize, v: f64) -> f64 {
        (v - self.mean[c]) / self.std[c]
    }

    pub fn invert(&self, c: usize, v: f64) -> f64 {
        v * self.std[c] + self.mean[c]
    }
}

/// Location of one RL step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StepIndex {
    pub episode: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub name: String,
    layout: ChannelLayout,
    episodes: Vec<Array2<f64>>,
    standardization: Option<Standardization>,
    offsets: Vec<usize>,
}

/// Ground-truth corruption flags in episode-concatenated step order.
///
/// Only corruption injection produces one and only evaluation consumes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionMask {
    lengths: Vec<usize>,
    flags: Vec<bool>,
}

impl CorruptionMask {
    pub fn new(lengths: Vec<usize>, flags: Vec<bool>) -> Result<Self> {
        if lengths.iter().sum::<usize>() != flags.len() {
            return Err(Error::Argument("mask length does not match episode lengths".into()));
        }
        Ok(Self { lengths, flags })
    }

    pub fn empty_for(d: &TrajectoryDataset) -> Self {
        Self {
            lengths: d.episode_lengths(),
            flags: vec![false; d.num_steps()],
        }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn episode_lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn matches(&self, d: &TrajectoryDataset) -> bool {
        self.lengths == d.episode_lengths()
    }

    pub(crate) fn set(&mut self, global: usize) {
        self.flags[global] = true;
    }
}

/// An `M x (2H + 1)` window of consecutive steps centered at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceWindow {
    pub values: Array2<f64>,
    pub episode: usize,
    pub t: usize,
    pub h: usize,
}

impl SliceWindow {
    /// Column holding `z_t` (0-based index `h`).
    pub fn center(&self) -> ArrayView1<'_, f64> {
        self.values.column(self.h)
    }

    /// Column-major flattening: each step vector stays contiguous.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.t().iter().copied().collect()
    }
}

impl TrajectoryDataset {
    pub fn new(name: impl Into<String>, layout: ChannelLayout, episodes: Vec<Array2<f64>>) -> Result<Self> {
        layout.validate()?;
        if episodes.is_empty() {
            return Err(Error::Argument("dataset needs at least one episode".into()));
        }
        for (i, ep) in episodes.iter().enumerate() {
            if ep.nrows() == 0 {
                return Err(Error::Argument(format!("episode {i} is empty")));
            }
            if ep.ncols() != layout.width() {
                return Err(Error::Argument(format!(
                    "episode {i} has {} channels, layout expects {}",
                    ep.ncols(),
                    layout.width()
                )));
            }
            if ep.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("episode {i} contains NaN or infinity")));
            }
        }
        let offsets = episodes
            .iter()
            .scan(0, |acc, ep| {
                let start = *acc;
                *acc += ep.nrows();
                Some(start)
            })
            .collect();
        Ok(Self {
            name: name.into(),
            layout,
            episodes,
            standardization: None,
            offsets,
        })
    }

    pub fn layout(&self) -> ChannelLayout {
        self.layout
    }

    pub fn width(&self) -> usize {
        self.layout.width()
    }

    pub fn episodes(&self) -> &[Array2<f64>] {
        &self.episodes
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episode_lengths(&self) -> Vec<usize> {
        self.episodes.iter().map(|e| e.nrows()).collect()
    }

    /// Total number of steps across all episodes.
    pub fn num_steps(&self) -> usize {
        self.offsets.last().unwrap() + self.episodes.last().unwrap().nrows()
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn global_index(&self, at: StepIndex) -> usize {
        self.offsets[at.episode] + at.t
    }

    pub fn step_index(&self, global: usize) -> StepIndex {
        let episode = match self.offsets.binary_search(&global) {
            Ok(e) => e,
            Err(e) => e - 1,
        };
        StepIndex {
            episode,
            t: global - self.offsets[episode],
        }
    }

    pub fn step_indices(&self) -> impl Iterator<Item = StepIndex> + '_ {
        self.episodes.iter().enumerate().flat_map(|(episode, ep)| {
            (0..ep.nrows()).map(move |t| StepIndex { episode, t })
        })
    }

    pub fn row(&self, at: StepIndex) -> ArrayView1<'_, f64> {
        self.episodes[at.episode].row(at.t)
    }

    pub(crate) fn row_mut(&mut self, at: StepIndex) -> ArrayViewMut1<'_, f64> {
        self.episodes[at.episode].row_mut(at.t)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.episodes.iter().flat_map(|e| e.iter().copied())
    }

    /// Z-score every channel with dataset-wide statistics. Channels with
    /// standard deviation below 1e-8 keep a recorded std of 1.
    pub fn standardize(&self) -> TrajectoryDataset {
        let m = self.width();
        let n = self.num_steps() as f64;
        let mut mean = vec![0.0; m];
        for ep in &self.episodes {
            for row in ep.rows() {
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; m];
        for ep in &self.episodes {
            for row in ep.rows() {
                for c in 0..m {
                    var[c] += (row[c] - mean[c]).powi(2);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < MIN_STD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        self.standardize_with(Standardization { mean, std })
    }

    /// Apply given statistics; the result records them for inversion.
    pub fn standardize_with(&self, stats: Standardization) -> TrajectoryDataset {
        let mut out = self.clone();
        for ep in &mut out.episodes {
            for mut row in ep.rows_mut() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = stats.apply(c, *v);
                }
            }
        }
        out.standardization = Some(stats);
        out
    }

    /// Map standardized values back to natural units.
    pub fn destandardize(&self) -> Result<TrajectoryDataset> {
        let stats = self
            .standardization
            .as_ref()
            .ok_or_else(|| Error::Argument("dataset is not standardized".into()))?;
        let mut out = self.clone();
        for ep in &mut out.episodes {
            for mut row in ep.rows_mut() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = stats.invert(c, *v);
                }
            }
        }
        out.standardization = None;
        Ok(out)
    }

    /// Extract the slice centered at `t` with edge replication.
    pub fn slice_at(&self, episode: usize, t: usize, h: usize) -> Result<SliceWindow> {
        let ep = self
            .episodes
            .get(episode)
            .ok_or_else(|| Error::Argument(format!("episode {episode} out of range")))?;
        if t >= ep.nrows() {
            return Err(Error::Argument(format!(
                "timestep {t} outside episode {episode} of length {}",
                ep.nrows()
            )));
        }
        let mut flat = vec![0.0; self.width() * (2 * h + 1)];
        self.write_slice_flat(StepIndex { episode, t }, h, &mut flat);
        let values = Array2::from_shape_vec((2 * h + 1, self.width()), flat)
            .expect("slice buffer size")
            .reversed_axes()
            .as_standard_layout()
            .to_owned();
        Ok(SliceWindow {
            values,
            episode,
            t,
            h,
        })
    }

    /// Write the column-major flattening of the slice at `at` into `out`.
    pub fn write_slice_flat(&self, at: StepIndex, h: usize, out: &mut [f64]) {
        let ep = &self.episodes[at.episode];
        let m = self.width();
        let last = ep.nrows() as isize - 1;
        for (j, chunk) in out.chunks_exact_mut(m).enumerate() {
            let src = (at.t as isize + j as isize - h as isize).clamp(0, last) as usize;
            for (dst, v) in chunk.iter_mut().zip(ep.row(src)) {
                *dst = *v;
            }
        }
    }

    /// Population standard deviation per selected channel.
    pub fn per_dim_std(&self, select: ChannelSelect) -> Result<Vec<f64>> {
        let channels = match select {
            ChannelSelect::State => self.layout.states(),
            ChannelSelect::Action => self.layout.actions(),
            ChannelSelect::All => 0..self.width(),
        };
        if channels.is_empty() {
            return Err(Error::Argument(format!("no channels selected by {select:?}")));
        }
        // Welford accumulation.
        let mut count = 0.0;
        let mut mean = vec![0.0; channels.len()];
        let mut m2 = vec![0.0; channels.len()];
        for ep in &self.episodes {
            for row in ep.rows() {
                count += 1.0;
                for (i, c) in channels.clone().enumerate() {
                    let delta = row[c] - mean[i];
                    mean[i] += delta / count;
                    m2[i] += delta * (row[c] - mean[i]);
                }
            }
        }
        Ok(m2.into_iter().map(|v| (v / count).sqrt()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Oscillator,
    Lissajous,
    PiecewiseRamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub episodes: usize,
    pub length: usize,
    pub layout: ChannelLayout,
    /// Bound on every raw entry.
    pub amplitude: f64,
    /// Largest slice half-width the dataset must support.
    pub max_half_width: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The desk-scale benchmark layout: 40 episodes of 250 steps,
    /// five states, two actions and a reward.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            kind: SyntheticKind::Oscillator,
            episodes: 40,
            length: 250,
            layout: ChannelLayout {
                state_dim: 5,
                action_dim: 2,
                reward_dim: 1,
            },
            amplitude: 1.0,
            max_half_width: 5,
            seed,
        }
    }
}

/// Per-channel sinusoid parameters for one episode.
struct Wave {
    amp: f64,
    omega: f64,
    phase: f64,
    damping: f64,
}

impl Wave {
    fn envelope(&self, t: f64) -> f64 {
        self.amp * (-self.damping * t).exp()
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TrajectoryDataset> {
    spec.layout.validate()?;
    if spec.episodes == 0 {
        return Err(Error::config("episodes", "must be at least 1"));
    }
    if spec.length < 2 * spec.max_half_width + 1 {
        return Err(Error::config(
            "length",
            format!("must be at least {}", 2 * spec.max_half_width + 1),
        ));
    }
    if !(spec.amplitude > 0.0 && spec.amplitude.is_finite()) {
        return Err(Error::config("amplitude", "must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = spec.layout;
    let episodes = (0..spec.episodes)
        .map(|_| match spec.kind {
            SyntheticKind::Oscillator => oscillator_episode(spec, &mut rng),
            SyntheticKind::Lissajous => lissajous_episode(spec, &mut rng),
            SyntheticKind::PiecewiseRamp => ramp_episode(spec, &mut rng),
        })
        .collect();
    let name = match spec.kind {
        SyntheticKind::Oscillator => "oscillator",
        SyntheticKind::Lissajous => "lissajous",
        SyntheticKind::PiecewiseRamp => "piecewise-ramp",
    };
    TrajectoryDataset::new(format!("{name}-{}", spec.seed), layout, episodes)
}

fn bounded_reward(states: &[f64], amplitude: f64) -> f64 {
    let mean = states.iter().sum::<f64>() / (states.len() as f64 * amplitude);
    amplitude * (2.0 * mean).tanh()
}

/// Damped oscillators; actions are the frequency-normalized velocity of the
/// matching state channel.
fn oscillator_episode(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let layout = spec.layout;
    let a = spec.amplitude;
    let waves: Vec<Wave> = (0..layout.state_dim)
        .map(|_| Wave {
            amp: a * rng.random_range(0.5..=1.0),
            omega: 2.0 * PI / rng.random_range(20.0..60.0),
            phase: rng.random_range(0.0..2.0 * PI),
            damping: rng.random_range(0.0..0.5 / spec.length as f64),
        })
        .collect();
    let mut ep = Array2::zeros((spec.length, layout.width()));
    for t in 0..spec.length {
        let tf = t as f64;
        let mut row = ep.row_mut(t);
        for (i, w) in waves.iter().enumerate() {
            row[i] = w.envelope(tf) * (w.omega * tf + w.phase).cos();
        }
        for (j, c) in layout.actions().enumerate() {
            let w = &waves[j % waves.len()];
            row[c] = -w.envelope(tf) * (w.omega * tf + w.phase).sin();
        }
        if let Some(c) = layout.reward() {
            let states: Vec<f64> = row.iter().take(layout.state_dim).copied().collect();
            row[c] = bounded_reward(&states, a);
        }
    }
    ep
}

/// Lissajous figures: shared base frequency with small integer ratios.
fn lissajous_episode(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let layout = spec.layout;
    let a = spec.amplitude;
    let base = 2.0 * PI / rng.random_range(60.0..120.0);
    let waves: Vec<Wave> = (0..layout.state_dim)
        .map(|_| Wave {
            amp: a * rng.random_range(0.5..=1.0),
            omega: base * rng.random_range(1..=3) as f64,
            phase: rng.random_range(0.0..2.0 * PI),
            damping: 0.0,
        })
        .collect();
    let mut ep = Array2::zeros((spec.length, layout.width()));
    for t in 0..spec.length {
        let tf = t as f64;
        let mut row = ep.row_mut(t);
        for (i, w) in waves.iter().enumerate() {
            row[i] = w.amp * (w.omega * tf + w.phase).sin();
        }
        for (j, c) in layout.actions().enumerate() {
            let w = &waves[j % waves.len()];
            row[c] = w.amp * (w.omega * tf + w.phase).cos();
        }
        if let Some(c) = layout.reward() {
            let states: Vec<f64> = row.iter().take(layout.state_dim).copied().collect();
            row[c] = bounded_reward(&states, a);
        }
    }
    ep
}

/// Piecewise-linear interpolation between random knots; actions are the
/// clamped, rescaled slopes.
fn ramp_episode(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let layout = spec.layout;
    let a = spec.amplitude;
    let mut ep = Array2::zeros((spec.length, layout.width()));
    let mut slopes = Array2::zeros((spec.length, layout.state_dim));
    for i in layout.states() {
        let mut t0 = 0usize;
        let mut v0 = rng.random_range(-a..=a);
        while t0 < spec.length {
            let span = rng.random_range(10..=30usize);
            let v1 = rng.random_range(-a..=a);
            let slope = (v1 - v0) / span as f64;
            for dt in 0..span.min(spec.length - t0) {
                ep[(t0 + dt, i)] = v0 + slope * dt as f64;
                slopes[(t0 + dt, i)] = slope;
            }
            t0 += span;
            v0 = v1;
        }
    }
    for t in 0..spec.length {
        for (j, c) in layout.actions().enumerate() {
            let s = slopes[(t, j % layout.state_dim)];
            ep[(t, c)] = (s * 5.0).clamp(-a, a);
        }
        if let Some(c) = layout.reward() {
            let states: Vec<f64> = ep.row(t).iter().take(layout.state_dim).copied().collect();
            ep[(t, c)] = bounded_reward(&states, a);
        }
    }
    ep
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    version: u32,
    name: String,
    layout: ChannelLayout,
    episode_lengths: Vec<usize>,
    standardization: Option<Standardization>,
    has_mask: bool,
}

/// Write a dataset (and optional mask) in the binary dataset format.
///
/// Values are stored as 32-bit floats, so the round trip is exact only for
/// values representable in single precision.
pub fn write_dataset<W: Write>(
    d: &TrajectoryDataset,
    mask: Option<&CorruptionMask>,
    mut w: W,
) -> Result<()> {
    if let Some(m) = mask {
        if !m.matches(d) {
            return Err(Error::Argument("mask shape does not match dataset".into()));
        }
    }
    let header = FileHeader {
        version: FORMAT_VERSION,
        name: d.name.clone(),
        layout: d.layout,
        episode_lengths: d.episode_lengths(),
        standardization: d.standardization.clone(),
        has_mask: mask.is_some(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(d.num_steps() * d.width() * 4);
    for v in d.values() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&payload)?;
    if let Some(m) = mask {
        let bytes: Vec<u8> = m.flags.iter().map(|&f| f as u8).collect();
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<(TrajectoryDataset, Option<CorruptionMask>)> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(LoadError::MalformedHeader("missing header line".into()).into());
    }
    let header: FileHeader = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| LoadError::MalformedHeader(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(LoadError::UnsupportedVersion(header.version).into());
    }
    header.layout.validate()?;
    let m = header.layout.width();
    let steps: usize = header.episode_lengths.iter().sum();
    if let Some(s) = &header.standardization {
        if s.mean.len() != m || s.std.len() != m {
            return Err(LoadError::ShapeMismatch(format!(
                "standardization has {} entries, layout has {m} channels",
                s.mean.len()
            ))
            .into());
        }
    }
    if header.episode_lengths.is_empty() || header.episode_lengths.contains(&0) {
        return Err(LoadError::ShapeMismatch("episodes must be nonempty".into()).into());
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let value_bytes = steps * m * 4;
    let expected = value_bytes + if header.has_mask { steps } else { 0 };
    if payload.len() != expected {
        return Err(LoadError::PayloadLength {
            expected,
            found: payload.len(),
        }
        .into());
    }

    let mut values = payload[..value_bytes]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let episodes = header
        .episode_lengths
        .iter()
        .map(|&len| Array2::from_shape_simple_fn((len, m), || values.next().unwrap()))
        .collect();
    let mut d = TrajectoryDataset::new(header.name, header.layout, episodes)?;
    d.standardization = header.standardization;

    let mask = if header.has_mask {
        let flags = payload[value_bytes..]
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(LoadError::ShapeMismatch(format!("mask byte {other} is not 0/1"))),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Some(CorruptionMask::new(header.episode_lengths, flags)?)
    } else {
        None
    };
    Ok((d, mask))
}

pub fn save(d: &TrajectoryDataset, mask: Option<&CorruptionMask>, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(d, mask, BufWriter::new(File::create(path)?))
}

pub fn load(path: impl AsRef<Path>) -> Result<(TrajectoryDataset, Option<CorruptionMask>)> {
    read_dataset(File::open(path)?)
}

/// Export as CSV: `episode,t,z0,...,z{M-1}`, one row per step.
pub fn write_csv<W: Write>(d: &TrajectoryDataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["episode".to_string(), "t".to_string()];
    header.extend((0..d.width()).map(|c| format!("z{c}")));
    out.write_record(&header).map_err(csv_error)?;
    for at in d.step_indices() {
        let mut record = vec![at.episode.to_string(), at.t.to_string()];
        record.extend(d.row(at).iter().map(|v| v.to_string()));
        out.write_record(&record).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    LoadError::MalformedHeader(format!("csv: {e}")).into()
}

/// Import CSV written by [`write_csv`]. Rows must be grouped by episode in
/// ascending `t`.
pub fn read_csv<R: Read>(r: R, name: &str, layout: ChannelLayout) -> Result<TrajectoryDataset> {
    let m = layout.width();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut episodes: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => {
                LoadError::ShapeMismatch(format!("line {line}: expected {} fields", m + 2)).into()
            }
            _ => csv_error(e),
        })?;
        if record.len() != m + 2 {
            return Err(LoadError::ShapeMismatch(format!(
                "line {line}: expected {} fields, found {}",
                m + 2,
                record.len()
            ))
            .into());
        }
        let parse_err = |what: &str| LoadError::MalformedHeader(format!("line {line}: cannot parse {what}"));
        let episode: usize = record[0].parse().map_err(|_| parse_err("episode"))?;
        if episode + 1 != episodes.len() {
            if episode != episodes.len() {
                return Err(parse_err("episode ordering").into());
            }
            episodes.push(Vec::new());
        }
        let ep = episodes.last_mut().expect("pushed above");
        for f in record.iter().skip(2) {
            ep.push(f.parse().map_err(|_| parse_err("value"))?);
        }
    }
    let episodes = episodes
        .into_iter()
        .map(|v| {
            let rows = v.len() / m;
            Array2::from_shape_vec((rows, m), v).map_err(|e| Error::Internal(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryDataset::new(name, layout, episodes)
}
