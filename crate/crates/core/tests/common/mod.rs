//! Independent oracles shared by the property and acceptance suites.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use srt_core::policy::{kl_to_reference, log_softmax, sample_rollouts, PolicyParams};
use srt_core::rewards::{apply_kl_in_reward, ground_truth_reward, majority_vote, srt_reward};
use srt_core::rl_core::{
    apply_update, assemble_gradient, compute_advantage, surrogate_value, AdvantageVector, Estimator, RolloutGroup,
    SurrogateConfig,
};
use srt_core::task_env::{generate_dataset, Dataset, Family, Prompt};
use srt_core::trainer::{rollout_stream, BatchItem, KlPlacement, TrainConfig};

/// Plurality winner among `0..k`, smallest index on ties, `None` when no
/// answer is parseable. Returns `(label, winner_count, parseable_count)`.
pub fn vote_oracle(answers: &[usize], k: usize) -> (Option<usize>, usize, usize) {
    let mut best: Option<(usize, usize)> = None;
    for candidate in 0..k {
        let c = answers.iter().filter(|&&a| a == candidate).count();
        if c > 0 && best.is_none_or(|(_, bc)| c > bc) {
            best = Some((candidate, c));
        }
    }
    let parseable = answers.iter().filter(|&&a| a < k).count();
    match best {
        Some((label, c)) => (Some(label), c, parseable),
        None => (None, 0, parseable),
    }
}

/// Every sequence in `{0..=k}^n`, the last symbol being malformed.
pub fn all_sequences(k: usize, n: usize) -> Vec<Vec<usize>> {
    let symbols = k + 1;
    (0..symbols.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let s = code % symbols;
                    code /= symbols;
                    s
                })
                .collect()
        })
        .collect()
}

/// Exact probability that the majority of `n` draws from `probs` equals `correct`.
/// The last entry of `probs` is the malformed symbol.
pub fn exact_maj(probs: &[f64], n: usize, correct: usize) -> f64 {
    let k = probs.len() - 1;
    all_sequences(k, n)
        .into_iter()
        .filter(|seq| vote_oracle(seq, k).0 == Some(correct))
        .map(|seq| seq.iter().map(|&s| probs[s]).product::<f64>())
        .sum()
}

pub fn random_params<R: Rng>(k: usize, dim: usize, scale: f64, rng: &mut R) -> PolicyParams {
    let mut p = PolicyParams::zeros(k, dim, rng.gen_range(0.5..2.0));
    for w in p.weights.iter_mut().chain(p.bias.iter_mut()) {
        *w = rng.gen_range(-scale..scale);
    }
    p
}

/// A prompt repeated `count` times with distinct ids.
pub fn replicated(prompt: &Prompt, template: &Dataset, count: usize) -> Dataset {
    let mut ds = template.clone();
    ds.prompts = (0..count as u64)
        .map(|id| Prompt {
            id,
            ..prompt.clone()
        })
        .collect();
    ds
}

pub struct GradientCase {
    pub groups: Vec<(RolloutGroup, AdvantageVector)>,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub surrogate: SurrogateConfig,
}

/// Random on-policy batch with rewards, KL shaping and advantages applied.
pub fn gradient_case(seed: u64, estimator: Estimator, alpha: f64, placement: KlPlacement) -> GradientCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(2..6);
    let dim = k;
    let params = random_params(k, dim, 1.0, &mut rng);
    let reference = random_params(k, dim, 1.0, &mut rng);
    let beta = 0.05;
    let data = generate_dataset(Family::NoisyEvidence, 2, rng.gen_range(1..4), k, dim, seed).unwrap();
    let n = rng.gen_range(2..7);
    let mut groups = Vec::new();
    for prompt in &data.prompts {
        let rollouts = sample_rollouts(&params, prompt, n, &mut rng).unwrap();
        let rewards: Vec<f64> = rollouts.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shaped = if placement == KlPlacement::InReward {
            let lp = log_softmax(&params.logits(&prompt.features).unwrap());
            let lr = log_softmax(&reference.logits(&prompt.features).unwrap());
            let kl: Vec<f64> = rollouts
                .iter()
                .map(|r| srt_core::policy::k3_from_log_ratio(lr[r.answer] - lp[r.answer]))
                .collect();
            apply_kl_in_reward(&rewards, &kl, beta).unwrap()
        } else {
            rewards.clone()
        };
        let adv = compute_advantage(estimator, prompt.id, &shaped, 1e-6).unwrap();
        groups.push((
            RolloutGroup {
                prompt: prompt.clone(),
                rollouts,
                rewards,
            },
            adv,
        ));
    }
    GradientCase {
        groups,
        params,
        reference,
        surrogate: SurrogateConfig {
            entropy_alpha: alpha,
            kl_beta_loss: if placement == KlPlacement::InLoss { beta } else { 0.0 },
            clip_eps: 0.2,
        },
    }
}

/// Largest violation of `|analytic - fd| <= rtol * |fd| + atol` over all
/// coordinates, using central differences with step `h`.
pub fn finite_difference_violation(case: &GradientCase, h: f64, rtol: f64, atol: f64) -> f64 {
    let (grad, _) = assemble_gradient(&case.groups, &case.params, &case.reference, &case.surrogate).unwrap();
    let value = |p: &PolicyParams| surrogate_value(&case.groups, p, &case.reference, &case.surrogate).unwrap();
    let nw = case.params.weights.len();
    let analytic = grad.flat();
    let mut worst = f64::NEG_INFINITY;
    for (j, &g) in analytic.iter().enumerate() {
        let shift = |delta: f64| {
            let mut p = case.params.clone();
            if j < nw {
                p.weights[j] += delta;
            } else {
                p.bias[j - nw] += delta;
            }
            p
        };
        let fd = (value(&shift(h)) - value(&shift(-h))) / (2.0 * h);
        worst = worst.max((g - fd).abs() - (rtol * fd.abs() + atol));
    }
    worst
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Update assembled directly from the primitives: fresh rollouts from the
/// rollout stream, rewarded by ground truth or by a vote over those rollouts.
pub fn reference_step(
    params: &PolicyParams,
    base: &PolicyParams,
    batch: &[BatchItem],
    step: u64,
    cfg: &TrainConfig,
    self_label: bool,
) -> PolicyParams {
    let mut groups = Vec::new();
    for item in batch {
        let mut s = rollout_stream(cfg.seed, step, item.prompt.id, item.epoch);
        let rollouts = sample_rollouts(params, &item.prompt, cfg.n_per_prompt, &mut s).unwrap();
        let rewards: Vec<f64> = if self_label {
            let answers: Vec<usize> = rollouts.iter().map(|r| r.answer).collect();
            let vote = majority_vote(item.prompt.id, &answers, params.k);
            if vote.is_abstain() {
                continue;
            }
            rollouts.iter().map(|r| srt_reward(r, &vote).unwrap()).collect()
        } else {
            rollouts.iter().map(|r| ground_truth_reward(r, &item.prompt)).collect()
        };
        let shaped = if cfg.kl_placement == KlPlacement::InReward {
            let kl = kl_to_reference(params, base, std::slice::from_ref(&item.prompt), &rollouts).unwrap();
            apply_kl_in_reward(&rewards, &kl.per_rollout, cfg.kl_beta).unwrap()
        } else {
            rewards.clone()
        };
        let adv = compute_advantage(cfg.algorithm, item.prompt.id, &shaped, cfg.grpo_eps).unwrap();
        groups.push((
            RolloutGroup {
                prompt: item.prompt.clone(),
                rollouts,
                rewards,
            },
            adv,
        ));
    }
    let (grad, _) = assemble_gradient(&groups, params, base, &cfg.surrogate()).unwrap();
    if grad.is_zero() {
        params.clone()
    } else {
        apply_update(params, &grad, cfg.learning_rate).unwrap()
    }
}

pub fn bits(p: &PolicyParams) -> Vec<u64> {
    p.weights.iter().chain(&p.bias).map(|x| x.to_bits()).collect()
}
