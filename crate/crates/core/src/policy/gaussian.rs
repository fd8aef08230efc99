use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::mat_vec;
use crate::rng::LabRng;

/// Floor for per-dimension log standard deviation.
pub const LOG_SD_MIN: f64 = -30.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian policy over latents with linear mean `mu(x) = W x`.
///
/// Responses are latents directly, so `log pi(h|x)` and its parameter
/// gradient are available in closed form. When `learn_scale` is false the
/// trainable parameters are `W` alone and the score function is exactly
/// linear in `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    dim: usize,
    weights: Vec<f64>,
    log_sd: Vec<f64>,
    learn_scale: bool,
}

impl GaussianPolicy {
    pub fn new(dim: usize, weights: Vec<f64>, log_sd: Vec<f64>, learn_scale: bool) -> Result<Self> {
        if dim == 0 || weights.len() != dim * dim || log_sd.len() != dim {
            return Err(LabError::Shape(format!(
                "gaussian policy of dimension {dim} needs {} weights and {dim} log-sds",
                dim * dim
            )));
        }
        if weights.iter().chain(&log_sd).any(|v| !v.is_finite()) {
            return Err(LabError::Numerical("gaussian parameters must be finite".into()));
        }
        Ok(Self {
            dim,
            weights,
            log_sd: log_sd.into_iter().map(|v| v.max(LOG_SD_MIN)).collect(),
            learn_scale,
        })
    }

    /// Shared scale in every dimension. Panics on a non-square weight vector.
    pub fn isotropic(weights: Vec<f64>, log_sd: f64, learn_scale: bool) -> Self {
        let dim = (weights.len() as f64).sqrt().round() as usize;
        Self::new(dim, weights, vec![log_sd; dim], learn_scale).expect("square weight matrix")
    }

    /// i.i.d. `Normal(0, init_sd^2)` for every stored parameter.
    pub fn init(dim: usize, learn_scale: bool, init_sd: f64, rng: &mut LabRng) -> Self {
        let mut draw = || init_sd * rng.sample::<f64, _>(StandardNormal);
        let weights = (0..dim * dim).map(|_| draw()).collect();
        let log_sd = (0..dim).map(|_| draw()).collect();
        Self {
            dim,
            weights,
            log_sd,
            learn_scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_sd(&self) -> &[f64] {
        &self.log_sd
    }

    pub fn learn_scale(&self) -> bool {
        self.learn_scale
    }

    pub fn param_count(&self) -> usize {
        self.dim * self.dim + if self.learn_scale { self.dim } else { 0 }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        if self.learn_scale {
            p.extend_from_slice(&self.log_sd);
        }
        p
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.param_count() {
            return Err(LabError::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let n = self.dim * self.dim;
        let log_sd = if self.learn_scale {
            params[n..].to_vec()
        } else {
            self.log_sd.clone()
        };
        Self::new(self.dim, params[..n].to_vec(), log_sd, self.learn_scale)
    }

    fn check(&self, x: &[f64], h: &[f64]) -> Result<()> {
        if x.len() != self.dim || h.len() != self.dim {
            return Err(LabError::Shape(format!(
                "gaussian policy of dimension {} got prompt {} / latent {}",
                self.dim,
                x.len(),
                h.len()
            )));
        }
        Ok(())
    }

    pub fn mean(&self, x: &[f64]) -> Vec<f64> {
        mat_vec(&self.weights, self.dim, self.dim, x)
    }

    pub fn sample(&self, x: &[f64], rng: &mut LabRng) -> Vec<f64> {
        self.mean(x)
            .into_iter()
            .zip(&self.log_sd)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn z(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        self.mean(x)
            .iter()
            .zip(h)
            .zip(&self.log_sd)
            .map(|((m, hv), ls)| (hv - m) * (-ls).exp())
            .collect()
    }

    pub fn log_prob(&self, x: &[f64], h: &[f64]) -> Result<f64> {
        self.check(x, h)?;
        let z = self.z(x, h);
        Ok(z.iter()
            .zip(&self.log_sd)
            .map(|(z, ls)| -0.5 * z * z - ls - HALF_LN_2PI)
            .sum())
    }

    /// `d log pi / d W = Sigma^-1 (h - W x) x^T`, then `z^2 - 1` per log-sd.
    pub fn log_prob_grad(&self, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        self.check(x, h)?;
        let d = self.dim;
        let mu = self.mean(x);
        let mut g = Vec::with_capacity(self.param_count());
        for j in 0..d {
            let prec = (-2.0 * self.log_sd[j]).exp();
            let r = (h[j] - mu[j]) * prec;
            g.extend(x.iter().map(|xk| r * xk));
        }
        if self.learn_scale {
            for j in 0..d {
                let z = (h[j] - mu[j]) * (-self.log_sd[j]).exp();
                g.push(z * z - 1.0);
            }
        }
        Ok(g)
    }

    /// `exp((log pi(h) - log pi(mode)) / d)`, in `(0, 1]`.
    pub fn normalized_likelihood(&self, x: &[f64], h: &[f64]) -> Result<f64> {
        self.check(x, h)?;
        let z = self.z(x, h);
        let sq: f64 = z.iter().map(|v| v * v).sum();
        Ok((-0.5 * sq / self.dim as f64).exp())
    }

    /// Closed-form `E_h[exp(-|h - t|^2 / tau)]` under this policy.
    pub fn expected_peak(&self, x: &[f64], target: &[f64], tau: f64) -> f64 {
        self.mean(x)
            .iter()
            .zip(target)
            .zip(&self.log_sd)
            .map(|((m, t), ls)| {
                let var = (2.0 * ls).exp();
                let denom = tau + 2.0 * var;
                (tau / denom).sqrt() * (-(m - t) * (m - t) / denom).exp()
            })
            .product()
    }
}
