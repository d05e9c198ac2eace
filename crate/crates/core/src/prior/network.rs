//! Parameter normalization and the feed-forward denoiser.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PriorError;
use crate::body::{BodyParams, PARAM_DIM};

/// Both people's `phi | theta | beta | gamma` blocks, person a first.
pub const PRIOR_DIM: usize = 2 * PARAM_DIM;
pub const DEFAULT_EMBED_DIM: usize = 64;
/// Dimensions whose spread is below this are only centered (std 1).
pub const STD_FLOOR: f64 = 1e-6;

/// Raw (unnormalized) vector of a pair.
pub fn pair_to_raw(pair: &[BodyParams; 2]) -> Vec<f64> {
    pair.iter().flat_map(|p| p.to_flat()).collect()
}

/// Per-dimension standardization fitted on a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ParamNormalizer {
    pub fn identity() -> Self {
        ParamNormalizer { mean: vec![0.0; PRIOR_DIM], std: vec![1.0; PRIOR_DIM] }
    }

    /// Mean and standard deviation of each dimension. A dimension that barely
    /// varies gets std 1, so off-distribution inputs stay on the data scale.
    pub fn fit(raw: &[Vec<f64>]) -> Result<Self, PriorError> {
        if raw.is_empty() {
            return Err(PriorError::DatasetTooSmall { found: 0, required: 1 });
        }
        let n = raw.len() as f64;
        let mut mean = vec![0.0; PRIOR_DIM];
        for x in raw {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; PRIOR_DIM];
        for x in raw {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| if v.sqrt() < STD_FLOOR { 1.0 } else { v.sqrt() }).collect();
        if mean.iter().chain(&std).any(|v| !v.is_finite()) {
            return Err(PriorError::NonFiniteData);
        }
        Ok(ParamNormalizer { mean, std })
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| x * s + m).collect()
    }

    pub fn encode(&self, pair: &[BodyParams; 2]) -> Vec<f64> {
        self.normalize(&pair_to_raw(pair))
    }

    /// Inverse of [`encode`](Self::encode); `sigma` is not part of the vector.
    pub fn decode(&self, x: &[f64], sigma: [f64; 2]) -> [BodyParams; 2] {
        let raw = self.denormalize(x);
        [BodyParams::from_flat(&raw[..PARAM_DIM], sigma[0]), BodyParams::from_flat(&raw[PARAM_DIM..], sigma[1])]
    }
}

/// Sinusoidal embedding of a diffusion step.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let k = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-k..k)),
            bias: Array1::from_shape_fn(fan_out, |_| rng.random_range(-k..k)),
        }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Anything that predicts the clean normalized sample from a noisy one.
pub trait Denoise: Sync {
    fn normalizer(&self) -> &ParamNormalizer;

    /// One row per sample; `t[i]` is the step of row `i`.
    fn predict_batch(&self, x_t: &Array2<f64>, t: &[usize]) -> Array2<f64>;

    fn predict(&self, x_t: &[f64], t: usize) -> Vec<f64> {
        let x = Array2::from_shape_vec((1, x_t.len()), x_t.to_vec()).expect("row vector");
        self.predict_batch(&x, &[t]).row(0).to_vec()
    }
}

/// Multilayer perceptron over `[x_t | embed(t)]` with SiLU activations.
///
/// With an empty `signal` the network output is the clean sample. Otherwise
/// `signal[t]` is the cumulative signal fraction of step `t` and the clean
/// sample is `sqrt(signal[t]) * x_t + sqrt(1 - signal[t]) * net(x_t, t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub normalizer: ParamNormalizer,
    pub embed_dim: usize,
    pub layers: Vec<Linear>,
    pub seed: u64,
    #[serde(default)]
    pub signal: Vec<f64>,
}

/// Activations kept for back-propagation.
pub(crate) struct Tape {
    /// Inputs to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
    t: Vec<usize>,
}

impl Denoiser {
    pub fn new(normalizer: ParamNormalizer, hidden_layers: usize, hidden_width: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![PRIOR_DIM + embed_dim];
        dims.extend(std::iter::repeat_n(hidden_width, hidden_layers));
        dims.push(PRIOR_DIM);
        let layers = dims.windows(2).map(|w| Linear::init(&mut rng, w[0], w[1])).collect();
        Denoiser { normalizer, embed_dim, layers, seed, signal: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        let shape_err = |m: String| Err(PriorError::Checkpoint(m));
        if self.normalizer.mean.len() != PRIOR_DIM || self.normalizer.std.len() != PRIOR_DIM {
            return shape_err("normalizer dimension mismatch".into());
        }
        if self.normalizer.std.iter().any(|s| !(*s >= STD_FLOOR) || !s.is_finite()) {
            return shape_err("normalizer std must be finite and floored".into());
        }
        let Some(first) = self.layers.first() else { return shape_err("no layers".into()) };
        if first.weight.ncols() != PRIOR_DIM + self.embed_dim {
            return shape_err("input layer width mismatch".into());
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].weight.nrows() != w[1].weight.ncols() {
                return shape_err(format!("layer {} output does not match layer {} input", i, i + 1));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return shape_err(format!("layer {i} bias length mismatch"));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return shape_err(format!("layer {i} has non-finite weights"));
            }
        }
        if self.layers.last().map(|l| l.weight.nrows()) != Some(PRIOR_DIM) {
            return shape_err("output layer width mismatch".into());
        }
        if self.signal.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return shape_err("signal fractions must lie in (0, 1]".into());
        }
        Ok(())
    }

    fn input(&self, x_t: &Array2<f64>, t: &[usize]) -> Array2<f64> {
        assert_eq!(x_t.ncols(), PRIOR_DIM, "sample dimension");
        assert_eq!(x_t.nrows(), t.len(), "one step per row");
        let mut input = Array2::zeros((x_t.nrows(), PRIOR_DIM + self.embed_dim));
        input.slice_mut(s![.., ..PRIOR_DIM]).assign(x_t);
        for (i, &ti) in t.iter().enumerate() {
            let e = time_embedding(ti, self.embed_dim);
            input.slice_mut(s![i, PRIOR_DIM..]).assign(&Array1::from(e));
        }
        input
    }

    /// Skip and output coefficients of step `t`.
    fn mix(&self, t: usize) -> (f64, f64) {
        match self.signal.get(t) {
            Some(a) => (a.sqrt(), (1.0 - a).sqrt()),
            None => (0.0, 1.0),
        }
    }

    fn combine(&self, x_t: &Array2<f64>, t: &[usize], mut net: Array2<f64>) -> Array2<f64> {
        if self.signal.is_empty() {
            return net;
        }
        for (i, &ti) in t.iter().enumerate() {
            let (skip, out) = self.mix(ti);
            let mut row = net.row_mut(i);
            row *= out;
            row.scaled_add(skip, &x_t.row(i));
        }
        net
    }

    pub(crate) fn forward_tape(&self, x_t: &Array2<f64>, t: &[usize]) -> (Array2<f64>, Tape) {
        let mut h = self.input(x_t, t);
        let mut tape = Tape { inputs: Vec::with_capacity(self.layers.len()), pre: Vec::new(), t: Vec::new() };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h.view());
            tape.inputs.push(h);
            if i == last {
                tape.t = t.to_vec();
                return (self.combine(x_t, t, z), tape);
            }
            h = z.mapv(silu);
            tape.pre.push(z);
        }
        unreachable!("denoiser has at least one layer")
    }

    /// Parameter gradients for an output gradient `d_out`.
    pub(crate) fn backward(&self, tape: &Tape, d_out: &Array2<f64>) -> Vec<Linear> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d = d_out.clone();
        if !self.signal.is_empty() {
            for (i, &ti) in tape.t.iter().enumerate() {
                let mut row = d.row_mut(i);
                row *= self.mix(ti).1;
            }
        }
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            grads.push(Linear { weight: d.t().dot(&tape.inputs[i]), bias: d.sum_axis(Axis(0)) });
            if i > 0 {
                let dh = d.dot(&layer.weight);
                d = dh * &tape.pre[i - 1].mapv(silu_grad);
            }
        }
        grads.reverse();
        grads
    }
}

impl Denoise for Denoiser {
    fn normalizer(&self) -> &ParamNormalizer {
        &self.normalizer
    }

    fn predict_batch(&self, x_t: &Array2<f64>, t: &[usize]) -> Array2<f64> {
        let mut h = self.input(x_t, t);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h.view());
            if i < last {
                h.mapv_inplace(silu);
            }
        }
        self.combine(x_t, t, h)
    }
}
