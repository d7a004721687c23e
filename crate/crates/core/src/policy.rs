//! Augmentation-strength policy and the parameterized augmenter.
//!
//! The policy is a diagonal Gaussian over one strength per perturbation
//! family: `μ = tanh(W·s + c)`, `σ_j = σ_min + softplus(ρ_j)`, with the state
//! `s = (batch entropy, mean confidence)`. It is trained with the score
//! function estimator.

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::model::Adam;
use crate::tensor::{sigmoid, softplus, Rng, Tensor};

/// Perturbation families in the order they are applied.
pub const FAMILIES: [&str; 5] = ["noise", "smooth", "contrast", "brightness", "cutout"];

/// Summary of the student's clean-view predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub batch_entropy: f64,
    pub mean_confidence: f64,
}

impl PolicyState {
    pub fn features(&self) -> [f64; 2] {
        [self.batch_entropy, self.mean_confidence]
    }
}

/// Mean per-row entropy (nats) and mean max-probability of `probs [B × C]`.
pub fn state_stats(probs: &Tensor) -> Result<PolicyState> {
    let (b, _) = probs.dims2()?;
    if b == 0 {
        return Err(domain("state statistics need a non-empty batch"));
    }
    let mut ent = 0.0;
    let mut conf = 0.0;
    for row in probs.rows() {
        ent -= row
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
        conf += row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(PolicyState {
        batch_entropy: ent / b as f64,
        mean_confidence: conf / b as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub sigma_min: f64,
    /// Initial `σ_j` before training.
    pub sigma_init: f64,
    pub lr: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.05,
            sigma_init: 0.3,
            lr: 1e-3,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return Err(crate::error::config("policy.sigma_min", "must be positive"));
        }
        if !(self.sigma_init > self.sigma_min && self.sigma_init.is_finite()) {
            return Err(crate::error::config(
                "policy.sigma_init",
                "must exceed sigma_min",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(crate::error::config("policy.lr", "must be positive"));
        }
        Ok(())
    }
}

/// A sampled strength vector with the quantities needed for its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct StrengthVector {
    pub a: Vec<f64>,
    pub log_prob: f64,
    pub entropy: f64,
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    dim: usize,
    state_dim: usize,
    /// `[dim × state_dim]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Pre-softplus spread parameters.
    pub rho: Vec<f64>,
    sigma_min: f64,
    adam: Adam,
}

fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y − 1), stable for large y
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl GaussianPolicy {
    /// Zero mean map, `σ = sigma_init` everywhere.
    pub fn new(dim: usize, state_dim: usize, config: &PolicyConfig) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(domain("policy needs at least one action dimension"));
        }
        let rho = vec![inverse_softplus(config.sigma_init - config.sigma_min); dim];
        let n = dim * state_dim + 2 * dim;
        Ok(Self {
            dim,
            state_dim,
            weight: vec![0.0; dim * state_dim],
            bias: vec![0.0; dim],
            rho,
            sigma_min: config.sigma_min,
            adam: Adam::new(n, config.lr, 0.9, 0.99),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(shape(&[self.state_dim], &[state.len()]));
        }
        Ok((0..self.dim)
            .map(|j| {
                let row = &self.weight[j * self.state_dim..(j + 1) * self.state_dim];
                let z = self.bias[j] + row.iter().zip(state).map(|(w, s)| w * s).sum::<f64>();
                z.tanh()
            })
            .collect())
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho
            .iter()
            .map(|&r| self.sigma_min + softplus(r))
            .collect()
    }

    /// Exact log-density of `a` under the policy at `state`.
    pub fn log_prob(&self, state: &[f64], a: &[f64]) -> Result<f64> {
        if a.len() != self.dim {
            return Err(shape(&[self.dim], &[a.len()]));
        }
        let mu = self.mean(state)?;
        Ok(gaussian_log_prob(a, &mu, &self.sigma()))
    }

    pub fn entropy(&self) -> f64 {
        gaussian_entropy(&self.sigma())
    }

    pub fn sample(&self, state: &[f64], rng: &mut Rng) -> Result<StrengthVector> {
        let mean = self.mean(state)?;
        let sigma = self.sigma();
        let a: Vec<f64> = mean
            .iter()
            .zip(&sigma)
            .map(|(m, s)| m + s * rng.normal())
            .collect();
        Ok(StrengthVector {
            log_prob: gaussian_log_prob(&a, &mean, &sigma),
            entropy: gaussian_entropy(&sigma),
            a,
            mean,
            sigma,
            state: state.to_vec(),
        })
    }

    /// Gradient of `J = advantage·log π(a|s) + β·H` w.r.t. `(W, c, ρ)`,
    /// flattened in that order.
    pub fn objective_grad(&self, sample: &StrengthVector, advantage: f64, beta: f64) -> Vec<f64> {
        let sd = self.state_dim;
        let mut g = vec![0.0; self.dim * sd + 2 * self.dim];
        let (gw, rest) = g.split_at_mut(self.dim * sd);
        let (gc, grho) = rest.split_at_mut(self.dim);
        for j in 0..self.dim {
            let (mu, s, a) = (sample.mean[j], sample.sigma[j], sample.a[j]);
            let dz = advantage * (a - mu) / (s * s) * (1.0 - mu * mu);
            gc[j] = dz;
            for k in 0..sd {
                gw[j * sd + k] = dz * sample.state[k];
            }
            let dsigma = advantage * ((a - mu) * (a - mu) / (s * s * s) - 1.0 / s) + beta / s;
            grho[j] = dsigma * sigmoid(self.rho[j]);
        }
        g
    }

    /// One ascent step on `J`. Returns `J` at the sample.
    pub fn update(&mut self, sample: &StrengthVector, advantage: f64, beta: f64) -> f64 {
        let grad = self.objective_grad(sample, advantage, beta);
        let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut flat: Vec<f64> = self
            .weight
            .iter()
            .chain(&self.bias)
            .chain(&self.rho)
            .copied()
            .collect();
        self.adam.step(&mut flat, &descent, None);
        let (w, rest) = flat.split_at(self.weight.len());
        let (c, rho) = rest.split_at(self.dim);
        self.weight.copy_from_slice(w);
        self.bias.copy_from_slice(c);
        self.rho.copy_from_slice(rho);
        policy_objective(sample.log_prob, advantage, 0.0, sample.entropy, beta)
    }
}

pub fn gaussian_log_prob(a: &[f64], mean: &[f64], sigma: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    a.iter()
        .zip(mean)
        .zip(sigma)
        .map(|((a, m), s)| {
            let z = (a - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * ln_2pi
        })
        .sum()
}

pub fn gaussian_entropy(sigma: &[f64]) -> f64 {
    let c = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    sigma.iter().map(|s| 0.5 * (c * s * s).ln()).sum()
}

/// `J = (R − b)·log π + β·H`, to be maximized.
pub fn policy_objective(log_prob: f64, reward: f64, baseline: f64, entropy: f64, beta: f64) -> f64 {
    (reward - baseline) * log_prob + beta * entropy
}

/// Per-family maximum strengths and the valid data range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise: f64,
    pub smooth: f64,
    pub contrast: f64,
    pub brightness: f64,
    pub cutout: f64,
    /// Outputs are clamped to `[-clip, clip]`.
    pub clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise: 1.5,
            smooth: 0.9,
            contrast: 0.8,
            brightness: 1.5,
            cutout: 0.5,
            clip: 10.0,
        }
    }
}

impl AugmentConfig {
    pub fn scales(&self) -> [f64; 5] {
        [
            self.noise,
            self.smooth,
            self.contrast,
            self.brightness,
            self.cutout,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in FAMILIES.iter().zip(self.scales()) {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(crate::error::config(
                    format!("augment.{name}"),
                    "must be a finite non-negative scale",
                ));
            }
        }
        if self.smooth > 1.0 || self.cutout > 1.0 {
            return Err(crate::error::config(
                "augment",
                "smooth and cutout scales must not exceed 1",
            ));
        }
        if !(self.clip > 0.0) {
            return Err(crate::error::config("augment.clip", "must be positive"));
        }
        Ok(())
    }
}

/// Applies the five perturbations to each row of `x [B × d]`. Each `a_j` is
/// clamped to `[-1, 1]` first; an all-zero `a` returns `x` untouched.
pub fn param_augment(
    x: &Tensor,
    a: &[f64],
    config: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    if a.len() != FAMILIES.len() {
        return Err(shape(&[FAMILIES.len()], &[a.len()]));
    }
    let (_, d) = x.dims2()?;
    if a.iter().all(|&v| v == 0.0) || d == 0 {
        return Ok(x.clone());
    }
    let a: Vec<f64> = a.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let s = config.scales();
    let noise = s[0] * a[0].abs();
    let mix = (s[1] * a[1].abs()).min(1.0);
    let contrast = (1.0 + s[2] * a[2]).max(0.0);
    let shift = s[3] * a[3];
    let cut = ((s[4] * a[4].abs()).min(1.0) * d as f64).round() as usize;

    let mut out = x.clone();
    let mut smoothed = vec![0.0; d];
    for row in out.data_mut().chunks_mut(d) {
        if noise > 0.0 {
            row.iter_mut().for_each(|v| *v += noise * rng.normal());
        }
        if mix > 0.0 {
            for i in 0..d {
                let l = row[i.saturating_sub(1)];
                let r = row[(i + 1).min(d - 1)];
                smoothed[i] = (1.0 - mix) * row[i] + mix * (l + row[i] + r) / 3.0;
            }
            row.copy_from_slice(&smoothed);
        }
        if contrast != 1.0 {
            let mean = row.iter().sum::<f64>() / d as f64;
            row.iter_mut()
                .for_each(|v| *v = mean + contrast * (*v - mean));
        }
        if shift != 0.0 {
            row.iter_mut().for_each(|v| *v += shift);
        }
        if cut > 0 {
            let start = rng.below(d - cut + 1);
            row[start..start + cut].iter_mut().for_each(|v| *v = 0.0);
        }
        row.iter_mut()
            .for_each(|v| *v = v.clamp(-config.clip, config.clip));
    }
    Ok(out)
}

/// Strengths for the non-learned pipeline: magnitude 0.5 in every family with
/// random signs.
pub fn fixed_strengths(rng: &mut Rng) -> Vec<f64> {
    (0..FAMILIES.len())
        .map(|_| if rng.bernoulli(0.5) { 0.5 } else { -0.5 })
        .collect()
}
