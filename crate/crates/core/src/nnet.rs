//! Dense noise-prediction network with sinusoidal timestep conditioning.
//!
//! The predictor maps a flattened slice concatenated with a timestep
//! embedding through `hidden_dims` Mish layers (with inverted dropout in
//! training mode) to an output of the same size as the flattened slice.
//! Gradients are computed by hand-written reverse-mode passes over a
//! [`ForwardCache`], and parameters are updated with Adam.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Hidden-layer shape shared by the detector and the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkShape {
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub dropout_rate: f64,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            hidden_dims: vec![256, 256, 256],
            time_embed_dim: 64,
            dropout_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl PredictorConfig {
    /// Predictor for `channels x (2h + 1)` slices.
    pub fn for_slice(channels: usize, h: usize, shape: &NetworkShape, seed: u64) -> Self {
        Self {
            input_dim: channels * (2 * h + 1),
            hidden_dims: shape.hidden_dims.clone(),
            time_embed_dim: shape.time_embed_dim,
            dropout_rate: shape.dropout_rate,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be at least 1"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims", "must be a nonempty list of positive sizes"));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config("time_embed_dim", "must be even"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer in declaration order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim + self.time_embed_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.input_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One affine layer; `weight` is `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Per-layer gradients, shaped like [`PredictorParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(p: &PredictorParams) -> Self {
        Self {
            layers: p
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    /// Flattened in parameter declaration order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    config: PredictorConfig,
    pub layers: Vec<Dense>,
    first_moment: Vec<Dense>,
    second_moment: Vec<Dense>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    layer_inputs: Vec<Array2<f64>>,
    activation_slopes: Vec<Array2<f64>>,
    dropout_masks: Vec<Option<Array2<f64>>>,
}

pub fn mish(x: f64) -> f64 {
    mish_with_derivative(x).0
}

pub fn mish_derivative(x: f64) -> f64 {
    mish_with_derivative(x).1
}

/// `x * tanh(softplus(x))` and its derivative from a single exponential,
/// using `tanh(ln(1 + n)) = n (n + 2) / (n (n + 2) + 2)` with `n = e^x`.
#[inline]
pub fn mish_with_derivative(x: f64) -> (f64, f64) {
    if x > 20.0 {
        return (x, 1.0);
    }
    let n = x.exp();
    let q = n * (n + 2.0);
    let t = q / (q + 2.0);
    let sigmoid = n / (1.0 + n);
    (x * t, t + x * (1.0 - t * t) * sigmoid)
}

/// Sinusoidal embedding of diffusion step `k`: `dim / 2` sines followed by
/// `dim / 2` cosines over a geometric frequency ladder.
pub fn timestep_embedding(k: usize, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    let kf = k as f64;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (kf * freq).sin();
        out[half + i] = (kf * freq).cos();
    }
}

pub fn init_predictor(config: PredictorConfig) -> Result<PredictorParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shapes = config.layer_shapes();
    let layers = shapes
        .iter()
        .map(|&(fan_in, fan_out)| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Dense {
                weight: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    rng.random_range(-bound..=bound)
                }),
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    let zeros = || shapes.iter().map(|&(i, o)| Dense::zeros(i, o)).collect();
    Ok(PredictorParams {
        config,
        layers,
        first_moment: zeros(),
        second_moment: zeros(),
        step: 0,
    })
}

impl PredictorParams {
    /// Rebuild parameters from stored layers with fresh optimizer state.
    pub fn from_layers(config: PredictorConfig, layers: Vec<Dense>, step: u64) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if layers.len() != shapes.len()
            || layers
                .iter()
                .zip(&shapes)
                .any(|(l, &s)| l.weight.dim() != s || l.bias.len() != s.1)
        {
            return Err(Error::Argument("layer shapes do not match predictor config".into()));
        }
        let zeros = || shapes.iter().map(|&(i, o)| Dense::zeros(i, o)).collect();
        Ok(Self {
            config,
            layers,
            first_moment: zeros(),
            second_moment: zeros(),
            step,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn first_moment(&self) -> &[Dense] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Dense] {
        &self.second_moment
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }

    fn assemble_input(&self, x: ArrayView2<f64>, ks: &[usize]) -> Array2<f64> {
        let d = self.config.input_dim;
        let e = self.config.time_embed_dim;
        let mut input = Array2::zeros((x.nrows(), d + e));
        input.slice_mut(s![.., ..d]).assign(&x);
        for (mut row, &k) in input.axis_iter_mut(Axis(0)).zip(ks) {
            let emb = row.as_slice_mut().expect("row-major input");
            timestep_embedding(k, e, &mut emb[d..]);
        }
        input
    }

    fn check_batch(&self, x: &ArrayView2<f64>, ks: &[usize]) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Argument(format!(
                "predictor expects {} inputs per row, got {}",
                self.config.input_dim,
                x.ncols()
            )));
        }
        if x.nrows() != ks.len() {
            return Err(Error::Argument(format!(
                "{} rows but {} diffusion steps",
                x.nrows(),
                ks.len()
            )));
        }
        if ks.contains(&0) {
            return Err(Error::Argument("diffusion step 0 has no noise to predict".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predictor input contains NaN or infinity".into()));
        }
        Ok(())
    }

    /// Batched forward pass. Each row of `x` is one flattened slice and
    /// `ks[i]` its diffusion step.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        ks: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_batch(&x, ks)?;
        let last = self.layers.len() - 1;
        let keep = 1.0 - self.config.dropout_rate;
        let dropout = mode == Mode::Train && self.config.dropout_rate > 0.0;

        let mut cache = ForwardCache {
            layer_inputs: Vec::with_capacity(self.layers.len()),
            activation_slopes: Vec::with_capacity(last),
            dropout_masks: Vec::with_capacity(last),
        };
        let mut h = self.assemble_input(x, ks);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            cache.layer_inputs.push(h);
            if i == last {
                return Ok((z, cache));
            }
            let mut slope = Array2::zeros(z.raw_dim());
            let mut a = z;
            Zip::from(&mut a).and(&mut slope).for_each(|v, d| {
                let (m, dm) = mish_with_derivative(*v);
                *v = m;
                *d = dm;
            });
            let mask = dropout.then(|| {
                Array2::from_shape_simple_fn(a.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
            });
            if let Some(m) = &mask {
                a *= m;
            }
            cache.activation_slopes.push(slope);
            cache.dropout_masks.push(mask);
            h = a;
        }
        unreachable!("predictor has at least one layer")
    }

    /// Deterministic evaluation-mode prediction.
    pub fn predict(&self, x: ArrayView2<f64>, ks: &[usize]) -> Result<Array2<f64>> {
        self.check_batch(&x, ks)?;
        let last = self.layers.len() - 1;
        let mut h = self.assemble_input(x, ks);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            h = if i == last { z } else { z.mapv_into(mish) };
        }
        Ok(h)
    }

    /// Reverse pass given the loss gradient with respect to the output.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> Gradients {
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut delta = d_out.clone();
        for i in (0..n).rev() {
            let input = &cache.layer_inputs[i];
            grads.push(Dense {
                weight: input.t().dot(&delta),
                bias: delta.sum_axis(Axis(0)),
            });
            if i == 0 {
                break;
            }
            let mut d_act = delta.dot(&self.layers[i].weight.t());
            if let Some(m) = &cache.dropout_masks[i - 1] {
                d_act *= m;
            }
            d_act *= &cache.activation_slopes[i - 1];
            delta = d_act;
        }
        grads.reverse();
        Gradients { layers: grads }
    }
}

/// Predict the noise for a single `channels x width` slice at step `k`.
pub fn predict_noise<R: Rng + ?Sized>(
    p: &PredictorParams,
    slice: ArrayView2<f64>,
    k: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let (rows, cols) = slice.dim();
    // Column-major flattening keeps each timestep's vector contiguous.
    let flat: Vec<f64> = slice.t().iter().copied().collect();
    let x = ArrayView2::from_shape((1, rows * cols), &flat)
        .map_err(|e| Error::Internal(e.to_string()))?;
    let (out, _) = p.forward(x, &[k], mode, rng)?;
    let out = out.into_shape_with_order((cols, rows)).map_err(|e| Error::Internal(e.to_string()))?;
    Ok(out.reversed_axes().as_standard_layout().to_owned())
}

/// One Adam update with bias correction.
pub fn train_step(p: &mut PredictorParams, grads: &Gradients, lr: f64) -> Result<()> {
    if grads.layers.len() != p.layers.len()
        || grads.layers.iter().zip(&p.layers).any(|(g, l)| {
            g.weight.dim() != l.weight.dim() || g.bias.len() != l.bias.len()
        })
    {
        return Err(Error::Internal("gradient shapes do not match parameters".into()));
    }
    p.step += 1;
    let t = p.step as i32;
    let correction1 = 1.0 - ADAM_BETA1.powi(t);
    let correction2 = 1.0 - ADAM_BETA2.powi(t);
    for (((layer, m), v), g) in p
        .layers
        .iter_mut()
        .zip(&mut p.first_moment)
        .zip(&mut p.second_moment)
        .zip(&grads.layers)
    {
        for (((w, m), v), &g) in layer
            .values_mut()
            .zip(m.values_mut())
            .zip(v.values_mut())
            .zip(g.values())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Flat read/write access to a parameter vector.
pub trait Differentiable {
    fn num_params(&self) -> usize;
    fn param(&self, i: usize) -> f64;
    fn set_param(&mut self, i: usize, value: f64);
}

impl Differentiable for Vec<f64> {
    fn num_params(&self) -> usize {
        self.len()
    }
    fn param(&self, i: usize) -> f64 {
        self[i]
    }
    fn set_param(&mut self, i: usize, value: f64) {
        self[i] = value;
    }
}

impl PredictorParams {
    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            if i < l.len() {
                return (li, i);
            }
            i -= l.len();
        }
        panic!("parameter index out of range");
    }
}

impl Differentiable for PredictorParams {
    fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    fn param(&self, i: usize) -> f64 {
        let (li, j) = self.locate(i);
        let l = &self.layers[li];
        if j < l.weight.len() {
            l.weight.as_slice().expect("standard layout")[j]
        } else {
            l.bias[j - l.weight.len()]
        }
    }

    fn set_param(&mut self, i: usize, value: f64) {
        let (li, j) = self.locate(i);
        let l = &mut self.layers[li];
        let wl = l.weight.len();
        if j < wl {
            l.weight.as_slice_mut().expect("standard layout")[j] = value;
        } else {
            l.bias[j - wl] = value;
        }
    }
}

/// Compare the analytic gradient against central differences on `probes`
/// randomly chosen coordinates and return the largest relative error.
///
/// `loss` returns the scalar loss and its flat gradient. The relative error
/// is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn finite_difference_check<P, F, R>(
    params: &P,
    loss: F,
    probes: usize,
    h: f64,
    rng: &mut R,
) -> Result<f64>
where
    P: Differentiable + Clone,
    F: Fn(&P) -> (f64, Vec<f64>),
    R: Rng + ?Sized,
{
    if probes == 0 {
        return Err(Error::Argument("finite-difference check needs at least one probe".into()));
    }
    let (_, analytic) = loss(params);
    let n = params.num_params();
    if analytic.len() != n {
        return Err(Error::Internal("analytic gradient length mismatch".into()));
    }
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.random_range(0..n);
        let w = params.param(i);
        probe.set_param(i, w + h);
        let (up, _) = loss(&probe);
        probe.set_param(i, w - h);
        let (down, _) = loss(&probe);
        probe.set_param(i, w);
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn tiny_config(dropout: f64) -> PredictorConfig {
        PredictorConfig {
            input_dim: 6,
            hidden_dims: vec![8, 5],
            time_embed_dim: 4,
            dropout_rate: dropout,
            seed: 11,
        }
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_predictor(tiny_config(0.1)).unwrap();
        let b = init_predictor(tiny_config(0.1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn table_shapes() {
        let cfg = PredictorConfig::for_slice(8, 5, &NetworkShape::default(), 0);
        let shapes = cfg.layer_shapes();
        assert_eq!(shapes, vec![(88 + 64, 256), (256, 256), (256, 256), (256, 88)]);
    }

    #[test]
    fn weight_scale_bound() {
        let cfg = PredictorConfig {
            input_dim: 2,
            hidden_dims: vec![16],
            time_embed_dim: 2,
            dropout_rate: 0.0,
            seed: 3,
        };
        let p = init_predictor(cfg).unwrap();
        // First layer has fan_in = 4.
        assert!(p.layers[0].weight.iter().all(|w| w.abs() <= 0.5));
        assert!(p.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn rejects_invalid_config() {
        let mut cfg = tiny_config(0.0);
        cfg.dropout_rate = 1.0;
        assert!(matches!(init_predictor(cfg), Err(Error::Config { .. })));
        let mut cfg = tiny_config(0.0);
        cfg.hidden_dims.clear();
        assert!(matches!(init_predictor(cfg), Err(Error::Config { .. })));
        let mut cfg = tiny_config(0.0);
        cfg.input_dim = 0;
        assert!(matches!(init_predictor(cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn mish_identities() {
        assert_eq!(mish(0.0), 0.0);
        assert!((mish(50.0) - 50.0).abs() < 1e-12);
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let fd = (mish(x + 1e-6) - mish(x - 1e-6)) / 2e-6;
            assert!((fd - mish_derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_network_outputs_final_bias() {
        let mut p = init_predictor(tiny_config(0.0)).unwrap();
        for l in &mut p.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let last = p.layers.len() - 1;
        p.layers[last].bias = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0, 1.0, 2.0]);
        let out = p.predict(batch(3, 6, 1).view(), &[1, 5, 9]).unwrap();
        for row in out.rows() {
            assert_eq!(row, p.layers[last].bias);
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_shaped() {
        let p = init_predictor(tiny_config(0.5)).unwrap();
        let slice = Array::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = predict_noise(&p, slice.view(), 4, Mode::Eval, &mut rng).unwrap();
        let b = predict_noise(&p, slice.view(), 4, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a, b);
        for k in [1, 50, 100] {
            let out = predict_noise(&p, slice.view(), k, Mode::Train, &mut rng).unwrap();
            assert_eq!(out.dim(), (2, 3));
        }
    }

    #[test]
    fn single_slice_matches_batched_column_major() {
        let p = init_predictor(tiny_config(0.0)).unwrap();
        let slice = Array::from_shape_fn((2, 3), |(i, j)| i as f64 - 0.3 * j as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let single = predict_noise(&p, slice.view(), 7, Mode::Eval, &mut rng).unwrap();
        // Columns are flattened one after another.
        let flat = Array2::from_shape_vec((1, 6), vec![0.0, 1.0, -0.3, 0.7, -0.6, 0.4]).unwrap();
        let batched = p.predict(flat.view(), &[7]).unwrap();
        for j in 0..3 {
            for i in 0..2 {
                assert_eq!(single[(i, j)], batched[(0, j * 2 + i)]);
            }
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = init_predictor(tiny_config(0.0)).unwrap();
        let mut x = batch(1, 6, 0);
        x[(0, 2)] = f64::NAN;
        assert!(matches!(p.predict(x.view(), &[3]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let p = init_predictor(PredictorConfig {
            input_dim: 3,
            hidden_dims: vec![16],
            time_embed_dim: 2,
            dropout_rate: 0.3,
            seed: 5,
        })
        .unwrap();
        let x = Array2::from_shape_vec((1, 3), vec![0.5, -0.2, 0.9]).unwrap();
        let eval = p.predict(x.view(), &[10]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let mut sum = Array2::<f64>::zeros((1, 3));
        let mut sum_sq = Array2::<f64>::zeros((1, 3));
        for _ in 0..n {
            let (out, _) = p.forward(x.view(), &[10], Mode::Train, &mut rng).unwrap();
            sum += &out;
            sum_sq += &out.mapv(|v| v * v);
        }
        for j in 0..3 {
            let mean = sum[(0, j)] / n as f64;
            let var = sum_sq[(0, j)] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - eval[(0, j)]).abs() < 3.0 * se + 1e-12, "col {j}");
        }
    }

    fn sum_squares_loss(p: &PredictorParams, x: &Array2<f64>, ks: &[usize]) -> (f64, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, cache) = p.forward(x.view(), ks, Mode::Eval, &mut rng).unwrap();
        let loss = 0.5 * out.iter().map(|v| v * v).sum::<f64>();
        (loss, p.backward(&cache, &out).to_flat())
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = init_predictor(tiny_config(0.0)).unwrap();
        let x = batch(4, 6, 2);
        let ks = [1, 20, 40, 99];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = finite_difference_check(&p, |q| sum_squares_loss(q, &x, &ks), 300, 1e-5, &mut rng)
            .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn quadratic_loss_exact() {
        let w = vec![0.5, -1.5, 2.0];
        let loss = |w: &Vec<f64>| (0.5 * w.iter().map(|v| v * v).sum::<f64>(), w.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = finite_difference_check(&w, loss, 10, 1e-5, &mut rng).unwrap();
        assert!(err < 1e-9);
        assert!(matches!(
            finite_difference_check(&w, loss, 0, 1e-5, &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn adam_zero_gradient_only_advances_step() {
        let mut p = init_predictor(tiny_config(0.0)).unwrap();
        let before = p.clone();
        let g = Gradients::zeros_like(&p);
        train_step(&mut p, &g, 1e-3).unwrap();
        assert_eq!(p.layers, before.layers);
        assert_eq!(p.first_moment, before.first_moment);
        assert_eq!(p.second_moment, before.second_moment);
        assert_eq!(p.step(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let mut p = init_predictor(tiny_config(0.0)).unwrap();
        let before = p.clone();
        let mut g = Gradients::zeros_like(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for l in &mut g.layers {
            l.values_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        }
        let lr = 1e-3;
        train_step(&mut p, &g, lr).unwrap();
        for ((a, b), gl) in p.layers.iter().zip(&before.layers).zip(&g.layers) {
            for ((wa, wb), gv) in a.values().zip(b.values()).zip(gl.values()) {
                let step = wa - wb;
                assert!((step + lr * gv.signum()).abs() < 1e-6 * lr, "{step} vs {gv}");
            }
        }
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = init_predictor(tiny_config(0.0)).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.layers.pop();
        assert!(matches!(train_step(&mut p, &g, 1e-3), Err(Error::Internal(_))));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = init_predictor(tiny_config(0.2)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let x = batch(5, 6, 3);
            let ks = [2, 4, 6, 8, 10];
            for _ in 0..20 {
                let (out, cache) = p.forward(x.view(), &ks, Mode::Train, &mut rng).unwrap();
                let g = p.backward(&cache, &out);
                train_step(&mut p, &g, 1e-3).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.is_finite());
    }

    #[test]
    fn flat_param_access_round_trips() {
        let mut p = init_predictor(tiny_config(0.0)).unwrap();
        let n = p.num_params();
        let g = Gradients::zeros_like(&p);
        assert_eq!(g.to_flat().len(), n);
        p.set_param(n - 1, 42.0);
        assert_eq!(p.param(n - 1), 42.0);
        assert_eq!(*p.layers.last().unwrap().bias.last().unwrap(), 42.0);
    }
}
