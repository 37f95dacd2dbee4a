//! Advantage estimators and the clipped policy-gradient surrogate.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::policy::{
    entropy, k3_from_log_ratio, log_softmax, logit_grad_logprob, softmax, Gradient, PolicyError, PolicyParams,
    Rollout,
};
use crate::task_env::Prompt;

#[derive(Debug, Error, PartialEq)]
pub enum RlError {
    #[error("{estimator} needs at least {min} rewards per group, got {got}")]
    GroupTooSmall {
        estimator: Estimator,
        min: usize,
        got: usize,
    },
    #[error("rollout for prompt {prompt_id} is off-policy (stored logprob {stored}, recomputed {recomputed})")]
    OffPolicy {
        prompt_id: u64,
        stored: f64,
        recomputed: f64,
    },
    #[error("advantage vector length {advantages} does not match {rollouts} rollouts")]
    LengthMismatch { advantages: usize, rollouts: usize },
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("update produced non-finite parameters")]
    NonFinite,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    MeanBaseline,
    Rloo,
    Grpo,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::MeanBaseline => "MeanBaseline",
            Estimator::Rloo => "RLOO",
            Estimator::Grpo => "GRPO",
        })
    }
}

impl FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "MeanBaseline" | "mean-baseline" | "reinforce" => Ok(Estimator::MeanBaseline),
            "RLOO" | "rloo" | "Rloo" => Ok(Estimator::Rloo),
            "GRPO" | "grpo" | "Grpo" => Ok(Estimator::Grpo),
            other => Err(format!("unknown algorithm `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector {
    pub prompt_id: u64,
    pub values: Vec<f64>,
    pub estimator: Estimator,
}

fn all_equal(rewards: &[f64]) -> bool {
    rewards.windows(2).all(|w| w[0] == w[1])
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `A_i = r_i - mean(r)`.
pub fn mean_baseline_advantage(prompt_id: u64, rewards: &[f64]) -> Result<AdvantageVector, RlError> {
    if rewards.is_empty() {
        return Err(RlError::GroupTooSmall {
            estimator: Estimator::MeanBaseline,
            min: 1,
            got: 0,
        });
    }
    let values = if all_equal(rewards) {
        vec![0.0; rewards.len()]
    } else {
        let m = mean(rewards);
        rewards.iter().map(|r| r - m).collect()
    };
    Ok(AdvantageVector {
        prompt_id,
        values,
        estimator: Estimator::MeanBaseline,
    })
}

/// Leave-one-out baseline: `A_i = r_i - sum_{j != i} r_j / (n - 1)`.
pub fn rloo_advantage(prompt_id: u64, rewards: &[f64]) -> Result<AdvantageVector, RlError> {
    let n = rewards.len();
    if n < 2 {
        return Err(RlError::GroupTooSmall {
            estimator: Estimator::Rloo,
            min: 2,
            got: n,
        });
    }
    let values = if all_equal(rewards) {
        vec![0.0; n]
    } else {
        let total: f64 = rewards.iter().sum();
        rewards
            .iter()
            .map(|r| r - (total - r) / (n - 1) as f64)
            .collect()
    };
    Ok(AdvantageVector {
        prompt_id,
        values,
        estimator: Estimator::Rloo,
    })
}

/// Group-standardized rewards using the population standard deviation.
/// Groups with `std < eps` get all-zero advantages.
pub fn grpo_advantage(prompt_id: u64, rewards: &[f64], eps: f64) -> Result<AdvantageVector, RlError> {
    let n = rewards.len();
    if n < 2 {
        return Err(RlError::GroupTooSmall {
            estimator: Estimator::Grpo,
            min: 2,
            got: n,
        });
    }
    let m = mean(rewards);
    let std = (rewards.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / n as f64).sqrt();
    let values = if all_equal(rewards) || std < eps {
        vec![0.0; n]
    } else {
        rewards.iter().map(|r| (r - m) / std.max(eps)).collect()
    };
    Ok(AdvantageVector {
        prompt_id,
        values,
        estimator: Estimator::Grpo,
    })
}

pub fn compute_advantage(
    estimator: Estimator,
    prompt_id: u64,
    rewards: &[f64],
    grpo_eps: f64,
) -> Result<AdvantageVector, RlError> {
    match estimator {
        Estimator::MeanBaseline => mean_baseline_advantage(prompt_id, rewards),
        Estimator::Rloo => rloo_advantage(prompt_id, rewards),
        Estimator::Grpo => grpo_advantage(prompt_id, rewards, grpo_eps),
    }
}

/// One prompt's rollouts with their (possibly KL-shaped) rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Prompt,
    pub rollouts: Vec<Rollout>,
    /// Rewards before any KL shaping.
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    fn sort_key(&self) -> (u64, Vec<usize>) {
        (self.prompt.id, self.rollouts.iter().map(|r| r.answer).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateConfig {
    pub entropy_alpha: f64,
    /// KL coefficient inside the loss; zero when the penalty is in the reward.
    pub kl_beta_loss: f64,
    pub clip_eps: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            entropy_alpha: 0.0,
            kl_beta_loss: 0.0,
            clip_eps: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateReport {
    pub grad_norm: f64,
    pub mean_entropy: f64,
    pub mean_kl: f64,
    pub mean_reward: f64,
    pub clip_fraction: f64,
}

/// Logprobs recomputed at training time must agree with the sampled ones.
pub const ON_POLICY_TOLERANCE: f64 = 1e-6;

/// Gradient of the surrogate
///
/// `L = (1/N) sum_i min(w_i A_i, clip(w_i) A_i) + alpha * mean_x H(pi(.|x)) - beta * (1/N) sum_i k3_i`
///
/// where `N` is the total rollout count and `w_i` the importance ratio against
/// the stored logprob. Groups are reduced in ascending prompt-id order, so the
/// result does not depend on the order of `groups`.
pub fn assemble_gradient(
    groups: &[(RolloutGroup, AdvantageVector)],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    config: &SurrogateConfig,
) -> Result<(Gradient, UpdateReport), RlError> {
    let mut grad = Gradient::zeros_like(params);
    let total: usize = groups.iter().map(|(g, _)| g.rollouts.len()).sum();
    if groups.is_empty() || total == 0 {
        return Ok((grad, UpdateReport::default()));
    }
    let mut order: Vec<&(RolloutGroup, AdvantageVector)> = groups.iter().collect();
    order.sort_by_key(|g| g.0.sort_key());

    let inv_n = 1.0 / total as f64;
    let inv_groups = 1.0 / groups.len() as f64;
    let (mut entropy_sum, mut kl_sum, mut reward_sum, mut clipped) = (0.0, 0.0, 0.0, 0usize);

    for (group, adv) in order {
        if adv.values.len() != group.rollouts.len() || group.rewards.len() != group.rollouts.len() {
            return Err(RlError::LengthMismatch {
                advantages: adv.values.len(),
                rollouts: group.rollouts.len(),
            });
        }
        let z = params.logits(&group.prompt.features)?;
        let probs = softmax(&z);
        let logp = log_softmax(&z);
        let logp_ref = log_softmax(&ref_params.logits(&group.prompt.features)?);
        let mut dlogits = vec![0.0; params.num_actions()];

        for ((rollout, &a), &r) in group.rollouts.iter().zip(&adv.values).zip(&group.rewards) {
            let lp = logp[rollout.answer];
            if (lp - rollout.logprob).abs() > ON_POLICY_TOLERANCE {
                return Err(RlError::OffPolicy {
                    prompt_id: rollout.prompt_id,
                    stored: rollout.logprob,
                    recomputed: lp,
                });
            }
            reward_sum += r;
            let ratio = (lp - rollout.logprob).exp();
            let is_clipped = (a > 0.0 && ratio > 1.0 + config.clip_eps) || (a < 0.0 && ratio < 1.0 - config.clip_eps);
            let log_ratio_ref = logp_ref[rollout.answer] - lp;
            kl_sum += k3_from_log_ratio(log_ratio_ref);

            // d/dtheta of (w A) is w A dlogpi; d/dtheta of k3 is (1 - rho) dlogpi
            let mut coef = 0.0;
            if is_clipped {
                clipped += 1;
            } else {
                coef += a * ratio;
            }
            if config.kl_beta_loss != 0.0 {
                let rho = log_ratio_ref.exp();
                coef -= config.kl_beta_loss * (1.0 - rho);
            }
            if coef != 0.0 {
                for (d, g) in dlogits.iter_mut().zip(logit_grad_logprob(&probs, rollout.answer)) {
                    *d += coef * inv_n * g;
                }
            }
        }

        let h = entropy(&probs);
        entropy_sum += h;
        if config.entropy_alpha != 0.0 {
            for (d, &p) in dlogits.iter_mut().zip(&probs) {
                let lp = if p > 0.0 { p.ln() } else { 0.0 };
                *d += config.entropy_alpha * inv_groups * (-p * (lp + h));
            }
        }
        grad.add_logit_grad(&dlogits, &group.prompt.features, 1.0, params.temperature);
    }

    let report = UpdateReport {
        grad_norm: grad.norm(),
        mean_entropy: entropy_sum * inv_groups,
        mean_kl: kl_sum * inv_n,
        mean_reward: reward_sum * inv_n,
        clip_fraction: clipped as f64 * inv_n,
    };
    Ok((grad, report))
}

/// Value of the surrogate whose gradient [`assemble_gradient`] returns,
/// with the stored rollout logprobs held fixed.
pub fn surrogate_value(
    groups: &[(RolloutGroup, AdvantageVector)],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    config: &SurrogateConfig,
) -> Result<f64, RlError> {
    let total: usize = groups.iter().map(|(g, _)| g.rollouts.len()).sum();
    if groups.is_empty() || total == 0 {
        return Ok(0.0);
    }
    let (mut policy_term, mut kl_term, mut entropy_term) = (0.0, 0.0, 0.0);
    for (group, adv) in groups {
        let logp = log_softmax(&params.logits(&group.prompt.features)?);
        let logp_ref = log_softmax(&ref_params.logits(&group.prompt.features)?);
        for (rollout, &a) in group.rollouts.iter().zip(&adv.values) {
            let ratio = (logp[rollout.answer] - rollout.logprob).exp();
            let clipped = ratio.clamp(1.0 - config.clip_eps, 1.0 + config.clip_eps);
            policy_term += (ratio * a).min(clipped * a);
            kl_term += k3_from_log_ratio(logp_ref[rollout.answer] - logp[rollout.answer]);
        }
        entropy_term += entropy(&softmax(&params.logits(&group.prompt.features)?));
    }
    let n = total as f64;
    Ok(policy_term / n + config.entropy_alpha * entropy_term / groups.len() as f64 - config.kl_beta_loss * kl_term / n)
}

/// Gradient ascent step `params + lr * gradient`.
pub fn apply_update(params: &PolicyParams, gradient: &Gradient, learning_rate: f64) -> Result<PolicyParams, RlError> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(RlError::BadLearningRate(learning_rate));
    }
    let mut next = params.clone();
    for (w, g) in next.weights.iter_mut().zip(&gradient.weights) {
        *w += learning_rate * g;
    }
    for (b, g) in next.bias.iter_mut().zip(&gradient.bias) {
        *b += learning_rate * g;
    }
    if next.weights.iter().chain(&next.bias).any(|x| !x.is_finite()) {
        return Err(RlError::NonFinite);
    }
    Ok(next)
}
