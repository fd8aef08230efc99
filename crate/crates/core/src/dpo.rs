//! DPO objective, its two-factor gradient, and the DPO / SFT trainers.
//!
//! For a pair `(y_w, y_l)` and reference `pi_ref`:
//!
//! ```text
//! r_hat = beta * ((log pi(y_w) - log pi(y_l)) - (log pi_ref(y_w) - log pi_ref(y_l)))
//! loss  = -log sigmoid(r_hat)
//! grad  = -beta * (1 - sigmoid(r_hat)) * (grad log pi(y_w) - grad log pi(y_l))
//! ```
//!
//! The first factor is the adaptive weight, the second the directional
//! guidance. Only the policy's own gradients enter the direction.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::PreferencePair;
use crate::error::{LabError, Result};
use crate::linalg::{self, sigmoid, softplus};
use crate::policy::{Payload, Policy, PolicySnapshot, Role};
use crate::rng;
use crate::world::Prompt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImplicitReward {
    pub r_hat: f64,
    pub beta: f64,
    pub policy_chosen: f64,
    pub policy_rejected: f64,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

impl ImplicitReward {
    pub fn policy_margin(&self) -> f64 {
        self.policy_chosen - self.policy_rejected
    }

    pub fn ref_margin(&self) -> f64 {
        self.ref_chosen - self.ref_rejected
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientDecomposition {
    pub reward: ImplicitReward,
    /// `1 - sigmoid(r_hat)`, evaluated as `sigmoid(-r_hat)`.
    pub adaptive_weight: f64,
    /// `grad log pi(y_w|x) - grad log pi(y_l|x)`.
    pub direction: Vec<f64>,
    /// `-beta * adaptive_weight * direction`.
    pub full_grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Pairs per step; 0 means full batch.
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Abort when the loss exceeds this multiple of its initial value.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 0.05,
            epochs: 50,
            batch_size: 0,
            shuffle_seed: 0,
            divergence_factor: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LabError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LabError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(LabError::Config("divergence_factor must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Mean implicit reward (DPO) or mean demo log-likelihood (SFT).
    pub mean_reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    pub kind: String,
    pub epochs: Vec<EpochStats>,
}

pub fn implicit_reward(
    policy: &Policy,
    reference: &Policy,
    pair: &PreferencePair,
    beta: f64,
) -> Result<ImplicitReward> {
    let x = &pair.prompt;
    let policy_chosen = policy.log_prob(x, &pair.chosen.payload)?;
    let policy_rejected = policy.log_prob(x, &pair.rejected.payload)?;
    let ref_chosen = reference.log_prob(x, &pair.chosen.payload)?;
    let ref_rejected = reference.log_prob(x, &pair.rejected.payload)?;
    let r_hat = beta * ((policy_chosen - policy_rejected) - (ref_chosen - ref_rejected));
    Ok(ImplicitReward {
        r_hat,
        beta,
        policy_chosen,
        policy_rejected,
        ref_chosen,
        ref_rejected,
    })
}

/// `grad log pi(y_w|x) - grad log pi(y_l|x)`.
pub fn direction(policy: &Policy, prompt: &Prompt, chosen: &Payload, rejected: &Payload) -> Result<Vec<f64>> {
    let gw = policy.log_prob_grad(prompt, chosen)?;
    let gl = policy.log_prob_grad(prompt, rejected)?;
    Ok(linalg::sub(&gw, &gl))
}

pub fn dpo_grad_decomposed(
    policy: &Policy,
    reference: &Policy,
    pair: &PreferencePair,
    beta: f64,
) -> Result<GradientDecomposition> {
    let reward = implicit_reward(policy, reference, pair, beta)?;
    let adaptive_weight = sigmoid(-reward.r_hat);
    let direction = direction(policy, &pair.prompt, &pair.chosen.payload, &pair.rejected.payload)?;
    let scale = -beta * adaptive_weight;
    let full_grad = direction.iter().map(|v| scale * v).collect();
    Ok(GradientDecomposition {
        reward,
        adaptive_weight,
        direction,
        full_grad,
    })
}

/// Mean `-log sigmoid(r_hat)` over a non-empty batch.
pub fn dpo_loss(policy: &Policy, reference: &Policy, batch: &[PreferencePair], beta: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(LabError::Usage("dpo_loss needs a non-empty batch".into()));
    }
    let terms: Vec<f64> = batch
        .par_iter()
        .map(|p| implicit_reward(policy, reference, p, beta).map(|r| softplus(-r.r_hat)))
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum::<f64>() / batch.len() as f64)
}

struct BatchEval {
    loss: f64,
    grad: Vec<f64>,
    mean_reward: f64,
}

/// Loss, mean gradient and mean `r_hat` over `pairs`. Per-pair terms are
/// computed in parallel and reduced in input order.
fn dpo_eval(policy: &Policy, reference: &Policy, pairs: &[&PreferencePair], beta: f64) -> Result<BatchEval> {
    let parts: Vec<(f64, GradientDecomposition)> = pairs
        .par_iter()
        .map(|p| {
            let g = dpo_grad_decomposed(policy, reference, p, beta)?;
            Ok((softplus(-g.reward.r_hat), g))
        })
        .collect::<Result<_>>()?;
    let n = pairs.len() as f64;
    let mut grad = vec![0.0; policy.param_count()];
    let (mut loss, mut reward) = (0.0, 0.0);
    for (l, g) in &parts {
        loss += l;
        reward += g.reward.r_hat;
        linalg::add_scaled(&mut grad, 1.0 / n, &g.full_grad);
    }
    Ok(BatchEval {
        loss: loss / n,
        grad,
        mean_reward: reward / n,
    })
}

/// Central-difference gradient of `loss` at `params`.
pub fn finite_diff_grad<F>(loss: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(LabError::Usage(format!("finite-difference step must be positive, got {step}")));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let up = loss(&theta)?;
        theta[i] = orig - step;
        let down = loss(&theta)?;
        theta[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(LabError::Numerical(format!(
                "non-finite loss when perturbing coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

fn batches<'a, T>(items: &'a [T], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<&'a T>> {
    if batch_size == 0 || batch_size >= items.len() {
        return vec![items.iter().collect()];
    }
    let mut order: Vec<&T> = items.iter().collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag::TRAIN_SHUFFLE, epoch as u64]));
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn descend(policy: &Policy, grad: &[f64], lr: f64) -> Result<Policy> {
    let mut theta = policy.params();
    linalg::add_scaled(&mut theta, -lr, grad);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(LabError::Numerical("parameter update produced non-finite values".into()));
    }
    policy.with_params(&theta)
}

/// Gradient descent on the DPO loss against a reference frozen at entry.
///
/// `reference` defaults to the input policy. The result keeps the input
/// role with `version + 1`.
pub fn dpo_train(
    policy: &PolicySnapshot,
    dataset: &[PreferencePair],
    config: &TrainConfig,
    reference: Option<&PolicySnapshot>,
) -> Result<(PolicySnapshot, TrainCurve)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(LabError::Usage("dpo_train needs a non-empty dataset".into()));
    }
    let reference = reference.unwrap_or(policy).policy().clone();
    let mut current = policy.policy().clone();
    let all: Vec<&PreferencePair> = dataset.iter().collect();
    let mut curve = TrainCurve {
        kind: "dpo".into(),
        epochs: Vec::with_capacity(config.epochs + 1),
    };
    let mut initial = None;
    let mut step = 0usize;
    for epoch in 0..=config.epochs {
        let full = dpo_eval(&current, &reference, &all, config.beta)?;
        let init = *initial.get_or_insert(full.loss);
        if !full.loss.is_finite() || full.loss > config.divergence_factor * init {
            return Err(LabError::Divergence {
                step,
                loss: full.loss,
                initial: init,
            });
        }
        curve.epochs.push(EpochStats {
            epoch,
            loss: full.loss,
            grad_norm: linalg::norm(&full.grad),
            mean_reward: full.mean_reward,
        });
        if epoch == config.epochs {
            break;
        }
        let groups = batches(dataset, config.batch_size, config.shuffle_seed, epoch);
        if groups.len() == 1 {
            current = descend(&current, &full.grad, config.learning_rate)?;
            step += 1;
        } else {
            for group in groups {
                let eval = dpo_eval(&current, &reference, &group, config.beta)?;
                current = descend(&current, &eval.grad, config.learning_rate)?;
                step += 1;
            }
        }
    }
    Ok((
        PolicySnapshot::new(policy.role(), policy.version() + 1, current),
        curve,
    ))
}

fn sft_eval(policy: &Policy, demos: &[&(Prompt, Payload)]) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<(f64, Vec<f64>)> = demos
        .par_iter()
        .map(|(x, y)| Ok((policy.log_prob(x, y)?, policy.log_prob_grad(x, y)?)))
        .collect::<Result<_>>()?;
    let n = demos.len() as f64;
    let mut grad = vec![0.0; policy.param_count()];
    let mut ll = 0.0;
    for (l, g) in &parts {
        ll += l;
        linalg::add_scaled(&mut grad, -1.0 / n, g);
    }
    Ok((-ll / n, grad))
}

/// Gradient descent on the mean negative log-likelihood of `demos`.
///
/// Stops early, keeping the previous parameters, as soon as an update would
/// raise the full-data loss, so the demo likelihood never decreases.
pub fn sft_train(
    policy: &PolicySnapshot,
    demos: &[(Prompt, Payload)],
    config: &TrainConfig,
    role: Role,
) -> Result<(PolicySnapshot, TrainCurve)> {
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(LabError::Config("learning_rate must be positive".into()));
    }
    if demos.is_empty() {
        return Err(LabError::Usage("sft_train needs at least one demonstration".into()));
    }
    let all: Vec<&(Prompt, Payload)> = demos.iter().collect();
    let mut current = policy.policy().clone();
    let (mut loss, mut grad) = sft_eval(&current, &all)?;
    if !loss.is_finite() {
        return Err(LabError::Divergence {
            step: 0,
            loss,
            initial: loss,
        });
    }
    let mut curve = TrainCurve {
        kind: "sft".into(),
        epochs: vec![EpochStats {
            epoch: 0,
            loss,
            grad_norm: linalg::norm(&grad),
            mean_reward: -loss,
        }],
    };
    let initial = loss;
    let mut step = 0usize;
    'outer: for epoch in 0..config.epochs {
        let groups = batches(demos, config.batch_size, config.shuffle_seed, epoch);
        let mut candidate = current.clone();
        for group in &groups {
            let g = if groups.len() == 1 {
                grad.clone()
            } else {
                sft_eval(&candidate, group)?.1
            };
            candidate = match descend(&candidate, &g, config.learning_rate) {
                Ok(c) => c,
                Err(_) => break 'outer,
            };
            step += 1;
        }
        let (new_loss, new_grad) = sft_eval(&candidate, &all)?;
        if new_loss.is_nan() {
            return Err(LabError::Divergence {
                step,
                loss: new_loss,
                initial,
            });
        }
        if !(new_loss < loss) {
            break;
        }
        current = candidate;
        loss = new_loss;
        grad = new_grad;
        curve.epochs.push(EpochStats {
            epoch: epoch + 1,
            loss,
            grad_norm: linalg::norm(&grad),
            mean_reward: -loss,
        });
    }
    Ok((PolicySnapshot::new(role, policy.version() + 1, current), curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::Phase;
    use crate::policy::{GaussianPolicy, Response, TokenPolicy};
    use crate::world::Pool;

    fn prompt(id: u64, f: Vec<f64>) -> Prompt {
        Prompt {
            id,
            features: f,
            pool: Pool::Iteration(0),
        }
    }

    fn latent_pair(x: Prompt, w: Vec<f64>, l: Vec<f64>) -> PreferencePair {
        let r = |h: Vec<f64>| Response {
            latent: h.clone(),
            payload: Payload::Latent(h),
            source: Role::Current,
        };
        PreferencePair::new(x, r(w), r(l), Some(4.0), Some(1.0), 0, Phase::SelfRewarding)
    }

    fn gaussian(seed: u64, learn: bool) -> Policy {
        Policy::Gaussian(GaussianPolicy::init(3, learn, 0.3, &mut rng::stream(seed, &[])))
    }

    #[test]
    fn reward_vanishes_when_policy_equals_reference() {
        let p = gaussian(0, true);
        let pair = latent_pair(
            prompt(0, vec![0.6, 0.0, 0.8]),
            vec![1.0, 0.0, 0.2],
            vec![-1.0, 0.5, 0.0],
        );
        let r = implicit_reward(&p, &p, &pair, 0.1).unwrap();
        assert_eq!(r.r_hat, 0.0);
        let g = dpo_grad_decomposed(&p, &p, &pair, 0.1).unwrap();
        assert_eq!(g.adaptive_weight, 0.5);
        let loss = dpo_loss(&p, &p, std::slice::from_ref(&pair), 0.1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn swapping_sides_negates_reward_and_direction() {
        let (p, q) = (gaussian(1, true), gaussian(2, true));
        let x = prompt(0, vec![0.0, 0.6, 0.8]);
        let a = latent_pair(x.clone(), vec![1.0, 0.1, 0.2], vec![-0.3, 0.5, 0.9]);
        let b = latent_pair(x, vec![-0.3, 0.5, 0.9], vec![1.0, 0.1, 0.2]);
        let ga = dpo_grad_decomposed(&p, &q, &a, 0.1).unwrap();
        let gb = dpo_grad_decomposed(&p, &q, &b, 0.1).unwrap();
        assert_eq!(ga.reward.r_hat, -gb.reward.r_hat);
        for (u, v) in ga.direction.iter().zip(&gb.direction) {
            assert_eq!(*u, -v);
        }
    }

    #[test]
    fn quadratic_finite_difference() {
        let theta = [0.5, -1.5, 2.0];
        let g = finite_diff_grad(|t| Ok(t.iter().map(|v| v * v).sum()), &theta, 1e-5).unwrap();
        for (gi, ti) in g.iter().zip(&theta) {
            assert!((gi - 2.0 * ti).abs() < 1e-8);
        }
        assert!(finite_diff_grad(|_| Ok(0.0), &theta, 0.0).is_err());
        let err = finite_diff_grad(|t| Ok(if t[1] > -1.5 { f64::NAN } else { 0.0 }), &theta, 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"));
    }

    #[test]
    fn empty_inputs_are_usage_errors() {
        let p = gaussian(0, true);
        assert!(matches!(dpo_loss(&p, &p, &[], 0.1), Err(LabError::Usage(_))));
        let snap = PolicySnapshot::new(Role::Current, 0, p);
        assert!(dpo_train(&snap, &[], &TrainConfig::default(), None).is_err());
        assert!(sft_train(&snap, &[], &TrainConfig::default(), Role::Initial).is_err());
    }

    #[test]
    fn zero_epochs_only_bumps_version() {
        let snap = PolicySnapshot::new(Role::Current, 4, gaussian(3, true));
        let pair = latent_pair(
            prompt(0, vec![1.0, 0.0, 0.0]),
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
        );
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, curve) = dpo_train(&snap, &[pair], &cfg, None).unwrap();
        assert_eq!(out.params(), snap.params());
        assert_eq!(out.version(), 5);
        assert_eq!(curve.epochs.len(), 1);
    }

    #[test]
    fn separated_pair_reward_rises_every_epoch() {
        let snap = PolicySnapshot::new(Role::Current, 0, gaussian(4, true));
        let pair = latent_pair(
            prompt(0, vec![0.6, 0.8, 0.0]),
            vec![2.0, 1.0, 0.0],
            vec![-2.0, -1.0, 0.5],
        );
        let cfg = TrainConfig {
            epochs: 40,
            learning_rate: 0.02,
            ..TrainConfig::default()
        };
        let (_, curve) = dpo_train(&snap, &[pair], &cfg, None).unwrap();
        for w in curve.epochs.windows(2) {
            assert!(w[1].mean_reward > w[0].mean_reward);
        }
    }

    #[test]
    fn collapsed_pairs_barely_move_the_policy() {
        let snap = PolicySnapshot::new(Role::Current, 0, gaussian(5, false));
        let mut data = Vec::new();
        for i in 0..20 {
            let f = vec![(i as f64).cos(), (i as f64).sin(), 0.0];
            let h = vec![0.3 * i as f64, 0.1, -0.2];
            let mut l = h.clone();
            l[0] += 1e-9;
            data.push(latent_pair(prompt(i, f), h, l));
        }
        let (out, _) = dpo_train(&snap, &data, &TrainConfig::default(), None).unwrap();
        let moved = linalg::norm(&linalg::sub(&out.params(), &snap.params()));
        assert!(moved < 1e-6, "{moved}");
    }

    #[test]
    fn single_demo_sft_converges_to_demo() {
        let g = GaussianPolicy::init(3, false, 0.1, &mut rng::stream(6, &[]));
        let snap = PolicySnapshot::new(Role::Base, 0, Policy::Gaussian(g));
        let x = prompt(0, vec![0.0, 0.6, 0.8]);
        let target = vec![1.0, -0.5, 0.25];
        let demos = vec![(x.clone(), Payload::Latent(target.clone()))];
        let cfg = TrainConfig {
            epochs: 2000,
            learning_rate: 0.3,
            ..TrainConfig::default()
        };
        let (out, curve) = sft_train(&snap, &demos, &cfg, Role::Initial).unwrap();
        let Policy::Gaussian(g) = out.policy() else { unreachable!() };
        let mu = g.mean(&x.features);
        assert!(linalg::norm(&linalg::sub(&mu, &target)) < 1e-3);
        for w in curve.epochs.windows(2) {
            assert!(w[1].loss < w[0].loss);
        }
        assert_eq!(out.role(), Role::Initial);
    }

    #[test]
    fn self_distillation_is_near_a_fixed_point() {
        let t = TokenPolicy::init(3, 3, 2, 0.3, &mut rng::stream(7, &[]));
        let policy = Policy::Token(t);
        let snap = PolicySnapshot::new(Role::Current, 0, policy.clone());
        let mut r = rng::stream(8, &[]);
        let mut demos = Vec::new();
        for i in 0..4000u64 {
            let x = prompt(i, vec![0.6, -0.8, 0.0]);
            let y = policy.sample(&x, &mut r);
            demos.push((x, y));
        }
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let (out, _) = sft_train(&snap, &demos, &cfg, Role::Current).unwrap();
        let moved = linalg::norm(&linalg::sub(&out.params(), &snap.params()));
        assert!(moved < 1e-3, "{moved}");
    }
}
