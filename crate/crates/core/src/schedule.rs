//! Variance-exploding noise bookkeeping: `x_t = x₀ + σ(t)·η`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal;

/// Geometric noise schedule `σ(t) = σ_min·(σ_max/σ_min)^t` on `t ∈ [0, 1]`,
/// discretised into `num_steps` sampler steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub num_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { sigma_min: 0.01, sigma_max: 5.0, num_steps: 64 }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, num_steps: usize) -> Result<Self> {
        let s = Self { sigma_min, sigma_max, num_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "schedule needs 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.num_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        Ok(())
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    /// Inverse of [`sigma`](Self::sigma).
    pub fn time_of(&self, sigma: f64) -> f64 {
        (sigma / self.sigma_min).ln() / (self.sigma_max / self.sigma_min).ln()
    }

    /// Sampler times `1 = t_0 > t_1 > … > t_N = 0`.
    pub fn times(&self) -> Vec<f64> {
        let n = self.num_steps as f64;
        (0..=self.num_steps).map(|i| 1.0 - i as f64 / n).collect()
    }

    /// `σ(t_i)` along [`times`](Self::times); endpoints are exact.
    pub fn sigmas(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.times().into_iter().map(|t| self.sigma(t)).collect();
        s[0] = self.sigma_max;
        *s.last_mut().unwrap() = self.sigma_min;
        s
    }

    /// Training-time noise level: `t` uniform on `[0, 1]`, so `log σ` is
    /// uniform between the endpoints.
    pub fn sample_sigma(&self, rng: &mut impl rand::Rng) -> f64 {
        self.sigma(rng.gen::<f64>())
    }
}

/// A forward-noised vector together with the draw that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub sigma_t: f64,
    pub eta: Vec<f64>,
}

/// `x_t = x₀ + σ(t)·η`, `η ~ N(0, I)`.
pub fn forward_noise(x0: &[f64], t: f64, schedule: &NoiseSchedule, rng: &mut impl rand::Rng) -> Result<NoisySample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("time {t} outside [0, 1]")));
    }
    let sigma_t = schedule.sigma(t);
    let eta = standard_normal(rng, x0.len());
    let x_t = x0.iter().zip(&eta).map(|(&x, &e)| x + sigma_t * e).collect();
    Ok(NoisySample { x_t, t, sigma_t, eta })
}

/// Tweedie: `∇ log p_σ(x) = (E[x₀ | x] − x) / σ²`.
pub fn score_from_denoiser(denoised: &[f64], x_t: &[f64], sigma_t: f64) -> Result<Vec<f64>> {
    if !(sigma_t > 0.0) {
        return Err(Error::ZeroSigma(sigma_t));
    }
    if denoised.len() != x_t.len() {
        return Err(Error::Dimension { expected: x_t.len(), got: denoised.len() });
    }
    let inv = 1.0 / (sigma_t * sigma_t);
    Ok(denoised.iter().zip(x_t).map(|(&d, &x)| (d - x) * inv).collect())
}
