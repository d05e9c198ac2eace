//! Forward noising process.

use serde::{Deserialize, Serialize};

use super::PriorError;

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_SIGMA_FIRST: f64 = 1e-4;
pub const DEFAULT_SIGMA_LAST: f64 = 0.02;

/// Per-step noise rates `sigma[t-1]` for `t = 1..=T` and their cumulative
/// signal fractions `sigma_prime[t] = prod_{i<=t} (1 - sigma_i)`, with
/// `sigma_prime[0] = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub sigma: Vec<f64>,
    pub sigma_prime: Vec<f64>,
}

impl DiffusionSchedule {
    /// Schedule from explicit per-step rates.
    pub fn from_rates(sigma: Vec<f64>) -> Result<Self, PriorError> {
        if sigma.is_empty() {
            return Err(PriorError::Config("schedule needs at least one step".into()));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return Err(PriorError::Config(format!("noise rate {s} outside (0, 1)")));
        }
        let mut sigma_prime = Vec::with_capacity(sigma.len() + 1);
        sigma_prime.push(1.0);
        let mut acc = 1.0;
        for s in &sigma {
            acc *= 1.0 - s;
            sigma_prime.push(acc);
        }
        Ok(DiffusionSchedule { sigma, sigma_prime })
    }

    pub fn steps(&self) -> usize {
        self.sigma.len()
    }

    /// Rate of step `t` (1-based).
    pub fn rate(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_SIGMA_FIRST, DEFAULT_SIGMA_LAST).expect("default schedule is valid")
    }
}

/// Linear rates from `sigma_first` to `sigma_last` over `steps` steps.
pub fn make_schedule(steps: usize, sigma_first: f64, sigma_last: f64) -> Result<DiffusionSchedule, PriorError> {
    if steps == 0 {
        return Err(PriorError::Config("schedule needs at least one step".into()));
    }
    if !(sigma_first > 0.0 && sigma_first <= sigma_last && sigma_last < 1.0) {
        return Err(PriorError::Config(format!("need 0 < sigma_first <= sigma_last < 1, got {sigma_first}, {sigma_last}")));
    }
    let rates = (0..steps)
        .map(|i| if steps == 1 { sigma_first } else { sigma_first + (sigma_last - sigma_first) * i as f64 / (steps - 1) as f64 })
        .collect();
    DiffusionSchedule::from_rates(rates)
}

/// `x_t = sqrt(sigma'_t) x0 + sqrt(1 - sigma'_t) eps`; `t = 0` returns `x0` unchanged.
pub fn diffuse(x0: &[f64], t: usize, eps: &[f64], schedule: &DiffusionSchedule) -> Vec<f64> {
    assert_eq!(x0.len(), eps.len(), "noise dimension differs from sample");
    assert!(t <= schedule.steps(), "step {t} beyond schedule length {}", schedule.steps());
    if t == 0 {
        return x0.to_vec();
    }
    let a = schedule.sigma_prime[t];
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect()
}
