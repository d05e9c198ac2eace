//! Diagonal Gaussian mixture over flattened poses, fitted by EM.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LossError;

/// Lower bound on every variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmPrior {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop once the mean log-likelihood improves by less than this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { max_iterations: 200, tolerance: 1e-6, seed: 0 }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GmmPrior {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let m = self.weights.len();
        if m == 0 || self.means.len() != m || self.variances.len() != m {
            return Err(LossError::InvalidPrior("component counts disagree".into()));
        }
        let d = self.dim();
        if self.means.iter().chain(&self.variances).any(|v| v.len() != d) {
            return Err(LossError::InvalidPrior("component dimensions disagree".into()));
        }
        if self.weights.iter().any(|&w| !(w > 0.0 && w <= 1.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(LossError::InvalidPrior("weights must lie in (0, 1] and sum to 1".into()));
        }
        if self.variances.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(LossError::InvalidPrior("variances must be positive".into()));
        }
        Ok(())
    }

    fn component_log_density(&self, m: usize, x: &[f64]) -> f64 {
        let mut acc = self.weights[m].ln();
        for ((xi, mu), var) in x.iter().zip(&self.means[m]).zip(&self.variances[m]) {
            let d = xi - mu;
            acc -= 0.5 * (LN_2PI + var.ln() + d * d / var);
        }
        acc
    }

    /// `-log sum_m w_m N(x; mu_m, diag(var_m))`.
    pub fn nll(&self, x: &[f64]) -> f64 {
        let logs: Vec<f64> = (0..self.components()).map(|m| self.component_log_density(m, x)).collect();
        -log_sum_exp(&logs)
    }

    /// Negative log-likelihood and its gradient.
    pub fn nll_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let logs: Vec<f64> = (0..self.components()).map(|m| self.component_log_density(m, x)).collect();
        let lse = log_sum_exp(&logs);
        let mut g = vec![0.0; x.len()];
        for (m, l) in logs.iter().enumerate() {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            for (k, gk) in g.iter_mut().enumerate() {
                *gk += r * (x[k] - self.means[m][k]) / self.variances[m][k];
            }
        }
        (-lse, g)
    }
}

/// Fits a mixture of `m` diagonal Gaussians to `library` by EM.
///
/// Components are seeded from distinct library entries. A component whose
/// variance collapses is floored at [`VARIANCE_FLOOR`] with a warning.
pub fn fit_gmm(library: &[Vec<f64>], m: usize, cfg: &EmConfig) -> Result<GmmPrior, LossError> {
    if m == 0 || library.len() < 10 * m {
        return Err(LossError::InvalidPrior(format!(
            "need at least {} poses for {m} components, got {}",
            10 * m.max(1),
            library.len()
        )));
    }
    let d = library[0].len();
    if library.iter().any(|x| x.len() != d || x.iter().any(|v| !v.is_finite())) {
        return Err(LossError::InvalidPrior("library entries must be finite and equally sized".into()));
    }
    let n = library.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut global_var = vec![0.0; d];
    let mean: Vec<f64> = (0..d).map(|k| library.iter().map(|x| x[k]).sum::<f64>() / n as f64).collect();
    for x in library {
        for k in 0..d {
            global_var[k] += (x[k] - mean[k]).powi(2) / n as f64;
        }
    }
    let global_var: Vec<f64> = global_var.into_iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
    let mut gmm = GmmPrior {
        weights: vec![1.0 / m as f64; m],
        means: sample(&mut rng, n, m).into_iter().map(|i| library[i].clone()).collect(),
        variances: vec![global_var; m],
    };

    let mut resp = vec![vec![0.0; m]; n];
    let mut prev = f64::NEG_INFINITY;
    let mut floored = 0;
    for _ in 0..cfg.max_iterations {
        let mut ll = 0.0;
        for (x, r) in library.iter().zip(resp.iter_mut()) {
            let logs: Vec<f64> = (0..m).map(|c| gmm.component_log_density(c, x)).collect();
            let lse = log_sum_exp(&logs);
            ll += lse;
            for c in 0..m {
                r[c] = (logs[c] - lse).exp();
            }
        }
        ll /= n as f64;

        floored = 0;
        for c in 0..m {
            let nk: f64 = resp.iter().map(|r| r[c]).sum::<f64>().max(1e-12);
            gmm.weights[c] = nk / n as f64;
            for k in 0..d {
                gmm.means[c][k] = library.iter().zip(&resp).map(|(x, r)| r[c] * x[k]).sum::<f64>() / nk;
            }
            for k in 0..d {
                let mu = gmm.means[c][k];
                let v = library.iter().zip(&resp).map(|(x, r)| r[c] * (x[k] - mu).powi(2)).sum::<f64>() / nk;
                if v < VARIANCE_FLOOR {
                    floored += 1;
                }
                gmm.variances[c][k] = v.max(VARIANCE_FLOOR);
            }
        }
        let total: f64 = gmm.weights.iter().sum();
        for w in &mut gmm.weights {
            *w = (*w / total).max(1e-300);
        }
        if (ll - prev).abs() < cfg.tolerance {
            break;
        }
        prev = ll;
    }
    if floored > 0 {
        log::debug!("{floored} mixture variances floored at {VARIANCE_FLOOR}");
    }
    Ok(gmm)
}
