//! Denoiser training and ancestral sampling.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::network::{pair_to_raw, Denoise, Denoiser, Linear, ParamNormalizer, DEFAULT_EMBED_DIM, PRIOR_DIM};
use super::schedule::{diffuse, DiffusionSchedule};
use super::PriorError;
use crate::body::{forward, BodyGrad, BodyModelAsset, BodyParams, BETA_OFFSET, GAMMA_OFFSET, PARAM_DIM, PHI_OFFSET, THETA_OFFSET};

pub const MIN_DATASET: usize = 64;

/// One training example with the tag of the dataset it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub params: [BodyParams; 2],
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    /// Output `sqrt(a_t) x_t + sqrt(1 - a_t) net(x_t, t)` instead of `net(x_t, t)`,
    /// where `a_t` is the cumulative signal fraction of step `t`.
    pub skip_connection: bool,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub embed_dim: usize,
    pub lambda_phi: f64,
    pub lambda_theta: f64,
    pub lambda_beta: f64,
    pub lambda_gamma: f64,
    /// Weight of the mean squared surface-sample distance (metres).
    pub lambda_v2v: f64,
    /// Sampling fraction per source tag. Empty samples pairs uniformly;
    /// otherwise unlisted sources are never drawn.
    pub source_weights: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 12000,
            batch_size: 64,
            learning_rate: 3e-3,
            cosine_decay: true,
            skip_connection: true,
            hidden_layers: 3,
            hidden_width: 512,
            embed_dim: DEFAULT_EMBED_DIM,
            lambda_phi: 1.0,
            lambda_theta: 1.0,
            lambda_beta: 1.0,
            lambda_gamma: 1.0,
            lambda_v2v: 1000.0,
            source_weights: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PriorError> {
        let bad = |m: &str| Err(PriorError::Config(m.into()));
        if self.steps == 0 || self.batch_size == 0 || self.hidden_width == 0 {
            return bad("steps, batch size and hidden width must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return bad("embedding dimension must be positive and even");
        }
        let lambdas = [self.lambda_phi, self.lambda_theta, self.lambda_beta, self.lambda_gamma, self.lambda_v2v];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("loss weights must be non-negative");
        }
        if self.source_weights.values().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("source weights must be non-negative");
        }
        Ok(())
    }

    fn group_weights(&self) -> [(std::ops::Range<usize>, f64); 4] {
        [
            (PHI_OFFSET..THETA_OFFSET, self.lambda_phi),
            (THETA_OFFSET..BETA_OFFSET, self.lambda_theta),
            (BETA_OFFSET..GAMMA_OFFSET, self.lambda_beta),
            (GAMMA_OFFSET..PARAM_DIM, self.lambda_gamma),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub loss_curve: Vec<f64>,
}

impl TrainReport {
    /// `1 - late / early`, each the mean over a window of `max(1, n/20)` steps.
    pub fn loss_reduction(&self) -> f64 {
        let n = self.loss_curve.len();
        if n == 0 {
            return 0.0;
        }
        let w = (n / 20).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        1.0 - mean(&self.loss_curve[n - w..]) / mean(&self.loss_curve[..w])
    }
}

/// A batch prepared for one loss evaluation.
pub struct Batch {
    /// Clean normalized samples, one row each.
    pub x0: Array2<f64>,
    pub t: Vec<usize>,
    pub eps: Array2<f64>,
    pub sigma: Vec<[f64; 2]>,
}

/// Loss of `pred` (normalized clean-sample predictions) against the batch,
/// averaged over rows, and its gradient with respect to `pred` when asked.
///
/// Each parameter group contributes its weighted mean squared difference in
/// normalized units; the surface term is the mean squared distance between
/// corresponding surface samples of the decoded bodies.
pub fn batch_loss(
    pred: &Array2<f64>,
    batch: &Batch,
    normalizer: &ParamNormalizer,
    cfg: &TrainConfig,
    asset: &BodyModelAsset,
    with_grad: bool,
) -> (f64, Option<Array2<f64>>) {
    let rows = pred.nrows();
    let inv_rows = 1.0 / rows as f64;
    let mut grad = with_grad.then(|| Array2::zeros(pred.raw_dim()));
    let mut total = 0.0;
    let groups = cfg.group_weights();
    for r in 0..rows {
        for p in 0..2 {
            for (range, lambda) in &groups {
                if *lambda == 0.0 {
                    continue;
                }
                let scale = lambda / range.len() as f64;
                for k in range.clone() {
                    let i = p * PARAM_DIM + k;
                    let d = pred[(r, i)] - batch.x0[(r, i)];
                    total += scale * d * d * inv_rows;
                    if let Some(g) = grad.as_mut() {
                        g[(r, i)] += 2.0 * scale * d * inv_rows;
                    }
                }
            }
        }
        if cfg.lambda_v2v > 0.0 {
            let est = normalizer.decode(pred.row(r).as_slice().expect("contiguous row"), batch.sigma[r]);
            let gt = normalizer.decode(batch.x0.row(r).as_slice().expect("contiguous row"), batch.sigma[r]);
            let n_surf = asset.surface_samples.len() as f64;
            let scale = cfg.lambda_v2v / (2.0 * n_surf) * inv_rows;
            for p in 0..2 {
                let pe = forward(asset, &est[p]);
                let pg = forward(asset, &gt[p]);
                let mut bg = with_grad.then(|| BodyGrad::zeros(asset));
                for (s, (a, b)) in pe.surface.iter().zip(&pg.surface).enumerate() {
                    let d = a - b;
                    total += scale * d.norm_squared();
                    if let Some(bg) = bg.as_mut() {
                        bg.surface[s] = d * (2.0 * scale);
                    }
                }
                if let (Some(bg), Some(g)) = (bg, grad.as_mut()) {
                    let d_raw = pe.backward(asset, &bg);
                    for (k, v) in d_raw.iter().enumerate() {
                        g[(r, p * PARAM_DIM + k)] += v * normalizer.std[p * PARAM_DIM + k];
                    }
                }
            }
        }
    }
    (total, grad)
}

struct Adam {
    m: Vec<Linear>,
    v: Vec<Linear>,
    step: i32,
}

impl Adam {
    fn new(layers: &[Linear]) -> Self {
        let zero = |l: &Linear| Linear { weight: Array2::zeros(l.weight.raw_dim()), bias: Array1::zeros(l.bias.raw_dim()) };
        Adam { m: layers.iter().map(zero).collect(), v: layers.iter().map(zero).collect(), step: 0 }
    }

    fn update(&mut self, layers: &mut [Linear], grads: &[Linear], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for (((layer, g), m), v) in layers.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pairs = [
                (layer.weight.as_slice_mut().unwrap(), g.weight.as_slice().unwrap(), m.weight.as_slice_mut().unwrap(), v.weight.as_slice_mut().unwrap()),
                (layer.bias.as_slice_mut().unwrap(), g.bias.as_slice().unwrap(), m.bias.as_slice_mut().unwrap(), v.bias.as_slice_mut().unwrap()),
            ];
            for (w, g, m, v) in pairs {
                for i in 0..w.len() {
                    m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                    v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                    w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

fn source_sampler(dataset: &[TrainingPair], cfg: &TrainConfig) -> Result<Option<(WeightedIndex<f64>, Vec<Vec<usize>>)>, PriorError> {
    if cfg.source_weights.is_empty() {
        return Ok(None);
    }
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut weights = Vec::new();
    for (tag, w) in &cfg.source_weights {
        let idx: Vec<usize> = dataset.iter().enumerate().filter(|(_, p)| &p.source == tag).map(|(i, _)| i).collect();
        if !idx.is_empty() && *w > 0.0 {
            members.push(idx);
            weights.push(*w);
        }
    }
    if weights.is_empty() {
        return Err(PriorError::Config("no source with positive weight is present in the dataset".into()));
    }
    let dist = WeightedIndex::new(&weights).map_err(|e| PriorError::Config(e.to_string()))?;
    Ok(Some((dist, members)))
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Trains a fresh denoiser on `dataset`.
pub fn train(
    dataset: &[TrainingPair],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    asset: &BodyModelAsset,
) -> Result<(Denoiser, TrainReport), PriorError> {
    cfg.validate()?;
    if dataset.len() < MIN_DATASET {
        return Err(PriorError::DatasetTooSmall { found: dataset.len(), required: MIN_DATASET });
    }
    let raw: Vec<Vec<f64>> = dataset.iter().map(|p| pair_to_raw(&p.params)).collect();
    if raw.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PriorError::NonFiniteData);
    }
    let normalizer = ParamNormalizer::fit(&raw)?;
    let encoded: Vec<Vec<f64>> = raw.iter().map(|x| normalizer.normalize(x)).collect();
    let mut model = Denoiser::new(normalizer, cfg.hidden_layers, cfg.hidden_width, cfg.embed_dim, cfg.seed);
    if cfg.skip_connection {
        model.signal = schedule.sigma_prime.clone();
    }
    let sampler = source_sampler(dataset, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut adam = Adam::new(&model.layers);
    let mut curve = Vec::with_capacity(cfg.steps);
    let b = cfg.batch_size;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..b)
            .map(|_| match &sampler {
                None => rng.random_range(0..dataset.len()),
                Some((dist, members)) => {
                    let m = &members[dist.sample(&mut rng)];
                    m[rng.random_range(0..m.len())]
                }
            })
            .collect();
        let mut x0 = Array2::zeros((b, PRIOR_DIM));
        for (r, &i) in idx.iter().enumerate() {
            x0.row_mut(r).assign(&Array1::from(encoded[i].clone()));
        }
        let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let eps = normal_matrix(&mut rng, b, PRIOR_DIM);
        let mut x_t = Array2::zeros((b, PRIOR_DIM));
        for r in 0..b {
            let row = diffuse(x0.row(r).as_slice().unwrap(), t[r], eps.row(r).as_slice().unwrap(), schedule);
            x_t.row_mut(r).assign(&Array1::from(row));
        }
        let sigma = idx.iter().map(|&i| [dataset[i].params[0].sigma, dataset[i].params[1].sigma]).collect();
        let batch = Batch { x0, t, eps, sigma };
        let (pred, tape) = model.forward_tape(&x_t, &batch.t);
        let (loss, grad) = batch_loss(&pred, &batch, &model.normalizer, cfg, asset, true);
        if !loss.is_finite() {
            return Err(PriorError::NonFinite { step });
        }
        curve.push(loss);
        let grads = model.backward(&tape, &grad.expect("gradient requested"));
        let lr = if cfg.cosine_decay {
            0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos())
        } else {
            cfg.learning_rate
        };
        adam.update(&mut model.layers, &grads, lr);
    }
    log::info!("prior training: loss {:.4} -> {:.4}", curve[0], curve[curve.len() - 1]);
    Ok((model, TrainReport { loss_curve: curve }))
}

/// Ancestral sampling from pure noise at `T` down to a clean normalized sample.
pub fn sample(denoiser: &dyn Denoise, schedule: &DiffusionSchedule, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..PRIOR_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    for t in (1..=schedule.steps()).rev() {
        let x0 = denoiser.predict(&x, t);
        let (a_t, a_prev) = (schedule.sigma_prime[t], schedule.sigma_prime[t - 1]);
        let beta = schedule.rate(t);
        let c0 = a_prev.sqrt() * beta / (1.0 - a_t);
        let ct = (1.0 - beta).sqrt() * (1.0 - a_prev) / (1.0 - a_t);
        let var = (1.0 - a_prev) / (1.0 - a_t) * beta;
        let sd = var.sqrt();
        x = x0
            .iter()
            .zip(&x)
            .map(|(p, xt)| {
                let noise: f64 = if t > 1 { StandardNormal.sample(&mut rng) } else { 0.0 };
                c0 * p + ct * xt + sd * noise
            })
            .collect();
    }
    x
}
