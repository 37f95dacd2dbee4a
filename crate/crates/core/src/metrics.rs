//! Evaluation metrics and the collapse detector.
//!
//! All sampling here uses [`Purpose::Eval`] streams, which are disjoint from
//! every training stream: evaluating more or less often never changes the
//! training trajectory.

use crate::policy::{entropy, kl_divergence, sample_index, PolicyError, PolicyParams};
use crate::rewards::majority_vote;
use crate::rng::{self, Purpose};
use crate::task_env::Dataset;

/// `k` evaluation samples for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub prompt_id: u64,
    pub correct_answer: usize,
    pub answers: Vec<usize>,
    pub probs: Vec<f64>,
}

impl EvalSample {
    pub fn correct_count(&self) -> usize {
        self.answers.iter().filter(|&&a| a == self.correct_answer).count()
    }
}

pub fn sample_eval(
    params: &PolicyParams,
    dataset: &Dataset,
    k: usize,
    eval_seed: u64,
) -> Result<Vec<EvalSample>, PolicyError> {
    if k == 0 {
        return Err(PolicyError::EmptyRollouts);
    }
    dataset
        .prompts
        .iter()
        .map(|p| {
            let probs = params.action_distribution(p)?;
            let mut s = rng::stream(eval_seed, Purpose::Eval, &[p.id]);
            let answers = (0..k).map(|_| sample_index(&probs, &mut s)).collect();
            Ok(EvalSample {
                prompt_id: p.id,
                correct_answer: p.correct_answer,
                answers,
                probs,
            })
        })
        .collect()
}

/// Mean over prompts of the per-prompt correct fraction.
pub fn avg_from_samples(samples: &[EvalSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples
        .iter()
        .map(|s| s.correct_count() as f64 / s.answers.len() as f64)
        .sum::<f64>()
        / samples.len() as f64
}

/// Fraction of prompts whose sample majority equals the correct answer.
pub fn maj_from_samples(samples: &[EvalSample], k: usize) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| majority_vote(s.prompt_id, &s.answers, k).label == Some(s.correct_answer))
        .count();
    hits as f64 / samples.len() as f64
}

pub fn avg_at_k(params: &PolicyParams, dataset: &Dataset, k: usize, eval_seed: u64) -> Result<f64, PolicyError> {
    Ok(avg_from_samples(&sample_eval(params, dataset, k, eval_seed)?))
}

pub fn maj_at_k(params: &PolicyParams, dataset: &Dataset, k: usize, eval_seed: u64) -> Result<f64, PolicyError> {
    Ok(maj_from_samples(
        &sample_eval(params, dataset, k, eval_seed)?,
        params.k,
    ))
}

/// Majority-vote predictions per prompt (`None` when every sample is malformed).
pub fn majority_predictions(samples: &[EvalSample], k: usize) -> Vec<(u64, Option<usize>)> {
    samples
        .iter()
        .map(|s| (s.prompt_id, majority_vote(s.prompt_id, &s.answers, k).label))
        .collect()
}

/// Largest average probability any single real answer receives across prompts.
pub fn template_answer_score(params: &PolicyParams, dataset: &Dataset) -> Result<f64, PolicyError> {
    let mut mass = vec![0.0; params.k];
    for p in &dataset.prompts {
        let probs = params.action_distribution(p)?;
        for (m, q) in mass.iter_mut().zip(&probs) {
            *m += q;
        }
    }
    let n = dataset.len().max(1) as f64;
    Ok(mass.into_iter().fold(0.0, f64::max) / n)
}

pub const METRICS_COLUMNS: [&str; 13] = [
    "step",
    "avg_at_k",
    "maj_at_k",
    "acc_gen",
    "acc_ver",
    "gv_gap",
    "pseudo_reward_mean",
    "kl_to_base",
    "mean_entropy",
    "parseable_fraction",
    "correct_of_parseable",
    "template_answer_score",
    "clip_fraction",
];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsRow {
    pub step: u64,
    pub avg_at_k: f64,
    pub maj_at_k: f64,
    pub acc_gen: f64,
    pub acc_ver: f64,
    pub gv_gap: f64,
    /// Mean agreement of the evaluation samples with their own majority vote.
    pub pseudo_reward_mean: f64,
    /// Exact `KL(pi || pi_base)` averaged over prompts.
    pub kl_to_base: f64,
    pub mean_entropy: f64,
    pub parseable_fraction: f64,
    pub correct_of_parseable: f64,
    pub template_answer_score: f64,
    pub clip_fraction: f64,
}

impl MetricsRow {
    pub fn values(&self) -> [f64; 12] {
        [
            self.avg_at_k,
            self.maj_at_k,
            self.acc_gen,
            self.acc_ver,
            self.gv_gap,
            self.pseudo_reward_mean,
            self.kl_to_base,
            self.mean_entropy,
            self.parseable_fraction,
            self.correct_of_parseable,
            self.template_answer_score,
            self.clip_fraction,
        ]
    }

    pub fn from_values(step: u64, v: [f64; 12]) -> Self {
        MetricsRow {
            step,
            avg_at_k: v[0],
            maj_at_k: v[1],
            acc_gen: v[2],
            acc_ver: v[3],
            gv_gap: v[4],
            pseudo_reward_mean: v[5],
            kl_to_base: v[6],
            mean_entropy: v[7],
            parseable_fraction: v[8],
            correct_of_parseable: v[9],
            template_answer_score: v[10],
            clip_fraction: v[11],
        }
    }

    pub fn get(&self, column: &str) -> Option<f64> {
        if column == "step" {
            return Some(self.step as f64);
        }
        let i = METRICS_COLUMNS.iter().position(|c| *c == column)?;
        Some(self.values()[i - 1])
    }
}

/// Computes one evaluation row from a single shared set of `k` samples per prompt.
pub fn evaluate(
    params: &PolicyParams,
    base: &PolicyParams,
    dataset: &Dataset,
    k: usize,
    eval_seed: u64,
    step: u64,
    clip_fraction: f64,
) -> Result<MetricsRow, PolicyError> {
    let samples = sample_eval(params, dataset, k, eval_seed)?;
    let kk = params.k;
    let n = samples.len().max(1) as f64;
    let avg = avg_from_samples(&samples);
    let maj = maj_from_samples(&samples, kk);

    let (mut agree, mut kl, mut ent) = (0.0, 0.0, 0.0);
    let (mut parseable, mut correct, mut total) = (0usize, 0usize, 0usize);
    for (s, p) in samples.iter().zip(&dataset.prompts) {
        let vote = majority_vote(s.prompt_id, &s.answers, kk);
        if let Some(label) = vote.label {
            agree += vote.vote_counts[&label] as f64 / s.answers.len() as f64;
        }
        kl += kl_divergence(&s.probs, &base.action_distribution(p)?);
        ent += entropy(&s.probs);
        parseable += s.answers.iter().filter(|&&a| a < kk).count();
        correct += s.correct_count();
        total += s.answers.len();
    }
    Ok(MetricsRow {
        step,
        avg_at_k: avg,
        maj_at_k: maj,
        acc_gen: avg,
        acc_ver: maj,
        gv_gap: maj - avg,
        pseudo_reward_mean: agree / n,
        kl_to_base: kl / n,
        mean_entropy: ent / n,
        parseable_fraction: parseable as f64 / total.max(1) as f64,
        correct_of_parseable: if parseable == 0 {
            0.0
        } else {
            correct as f64 / parseable as f64
        },
        template_answer_score: template_answer_score(params, dataset)?,
        clip_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapPoint {
    pub threshold: f64,
    /// Mean over retained prompts of correct / parseable samples.
    pub per_prompt_accuracy: f64,
    pub majority_accuracy: f64,
    /// Retained prompts over all prompts (abstaining prompts count in the denominator).
    pub prompt_fraction: f64,
}

/// Generation-verification gap as a function of the self-consistency cut-off.
/// The curve stops at the first threshold that retains no prompt.
pub fn gv_gap_curve(
    params: &PolicyParams,
    dataset: &Dataset,
    k: usize,
    thresholds: &[f64],
    eval_seed: u64,
) -> Result<Vec<GapPoint>, PolicyError> {
    let samples = sample_eval(params, dataset, k, eval_seed)?;
    Ok(gap_curve_from_samples(&samples, params.k, thresholds))
}

pub fn gap_curve_from_samples(samples: &[EvalSample], k: usize, thresholds: &[f64]) -> Vec<GapPoint> {
    let votes: Vec<_> = samples
        .iter()
        .map(|s| (s, majority_vote(s.prompt_id, &s.answers, k)))
        .collect();
    let mut curve = Vec::new();
    for &t in thresholds {
        let kept: Vec<_> = votes
            .iter()
            .filter(|(_, v)| !v.is_abstain() && v.majority_fraction >= t)
            .collect();
        if kept.is_empty() {
            break;
        }
        let m = kept.len() as f64;
        let per_prompt = kept
            .iter()
            .map(|(s, v)| {
                let parseable: usize = v.vote_counts.values().sum();
                s.correct_count() as f64 / parseable as f64
            })
            .sum::<f64>()
            / m;
        let majority = kept
            .iter()
            .filter(|(s, v)| v.label == Some(s.correct_answer))
            .count() as f64
            / m;
        curve.push(GapPoint {
            threshold: t,
            per_prompt_accuracy: per_prompt,
            majority_accuracy: majority,
            prompt_fraction: m / samples.len() as f64,
        });
    }
    curve
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseThresholds {
    pub pr_min: f64,
    pub acc_chance_mult: f64,
    pub kl_mult: f64,
}

impl Default for CollapseThresholds {
    fn default() -> Self {
        CollapseThresholds {
            pr_min: 0.9,
            acc_chance_mult: 1.5,
            kl_mult: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseEvidence {
    pub pseudo_reward: f64,
    pub test_acc: f64,
    /// KL at the reported row divided by KL at the peak row.
    pub kl_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseVerdict {
    pub collapsed: bool,
    pub trigger_step: Option<u64>,
    pub peak_step: u64,
    /// Values at the trigger row, or at the final row when nothing fired.
    pub evidence: CollapseEvidence,
}

/// Flags the first row after the accuracy peak where pseudo-reward is
/// saturated, accuracy is near chance and KL to the base has spiked.
/// Returns `None` for an empty history.
pub fn detect_collapse(
    history: &[MetricsRow],
    thresholds: &CollapseThresholds,
    alphabet_size: usize,
) -> Option<CollapseVerdict> {
    let first = history.first()?;
    let peak = history.iter().fold(first, |best, row| {
        if row.avg_at_k > best.avg_at_k {
            row
        } else {
            best
        }
    });
    let chance = 1.0 / alphabet_size as f64;
    let ratio = |row: &MetricsRow| {
        if peak.kl_to_base > 0.0 {
            row.kl_to_base / peak.kl_to_base
        } else if row.kl_to_base > 0.0 {
            f64::INFINITY
        } else {
            1.0
        }
    };
    let evidence = |row: &MetricsRow| CollapseEvidence {
        pseudo_reward: row.pseudo_reward_mean,
        test_acc: row.avg_at_k,
        kl_ratio: ratio(row),
    };
    let trigger = history.iter().filter(|r| r.step > peak.step).find(|r| {
        r.pseudo_reward_mean >= thresholds.pr_min
            && r.avg_at_k <= thresholds.acc_chance_mult * chance
            && r.kl_to_base >= thresholds.kl_mult * peak.kl_to_base
    });
    let last = history.last().expect("non-empty");
    Some(CollapseVerdict {
        collapsed: trigger.is_some(),
        trigger_step: trigger.map(|r| r.step),
        peak_step: peak.step,
        evidence: evidence(trigger.unwrap_or(last)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::BaseInit;
    use crate::task_env::{generate_dataset, Family};

    fn row(step: u64, acc: f64, pr: f64, kl: f64) -> MetricsRow {
        MetricsRow {
            step,
            avg_at_k: acc,
            pseudo_reward_mean: pr,
            kl_to_base: kl,
            ..MetricsRow::default()
        }
    }

    #[test]
    fn improving_history_does_not_collapse() {
        let h: Vec<_> = (0..10).map(|i| row(i * 10, 0.3 + 0.05 * i as f64, 0.5, 0.1 * i as f64)).collect();
        let v = detect_collapse(&h, &CollapseThresholds::default(), 5).unwrap();
        assert!(!v.collapsed);
        assert_eq!(v.peak_step, 90);
        assert!(detect_collapse(&[], &CollapseThresholds::default(), 5).is_none());
    }

    #[test]
    fn synthetic_collapse_fires() {
        let h = vec![
            row(0, 0.4, 0.5, 0.0),
            row(20, 0.6, 0.7, 0.1),
            row(40, 0.5, 0.95, 0.6),
            row(60, 0.1, 0.99, 1.0),
            row(80, 0.1, 0.99, 1.2),
        ];
        let v = detect_collapse(&h, &CollapseThresholds::default(), 5).unwrap();
        assert!(v.collapsed);
        assert_eq!(v.peak_step, 20);
        assert_eq!(v.trigger_step, Some(60));
        assert!(v.trigger_step.unwrap() > v.peak_step);
        assert!((v.evidence.kl_ratio - 10.0).abs() < 1e-12);
    }

    #[test]
    fn template_score_limits() {
        let ds = generate_dataset(Family::NoisyEvidence, 2, 50, 4, 4, 1).unwrap();
        let uniform = PolicyParams::zeros(4, 4, 1.0);
        assert!((template_answer_score(&uniform, &ds).unwrap() - 0.2).abs() < 1e-12);
        let mut templ = PolicyParams::base(4, 4, &BaseInit::default());
        templ.bias[1] = 200.0;
        assert!(template_answer_score(&templ, &ds).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn deterministic_correct_policy_scores_one() {
        let ds = generate_dataset(Family::Plurality, 1, 40, 3, 3, 2).unwrap();
        let mut p = PolicyParams::base(3, 3, &BaseInit::default());
        for w in p.weights.iter_mut() {
            *w *= 1000.0;
        }
        assert_eq!(avg_at_k(&p, &ds, 8, 1).unwrap(), 1.0);
        assert_eq!(maj_at_k(&p, &ds, 8, 1).unwrap(), 1.0);
    }

    #[test]
    fn k1_majority_equals_average() {
        let ds = generate_dataset(Family::NoisyEvidence, 3, 200, 4, 4, 5).unwrap();
        let p = PolicyParams::base(4, 4, &BaseInit::default());
        let s = sample_eval(&p, &ds, 1, 3).unwrap();
        assert_eq!(avg_from_samples(&s), maj_from_samples(&s, 4));
    }

    #[test]
    fn gap_curve_edges() {
        let ds = generate_dataset(Family::NoisyEvidence, 4, 300, 5, 5, 5).unwrap();
        let p = PolicyParams::base(5, 5, &BaseInit::default());
        let s = sample_eval(&p, &ds, 16, 9).unwrap();
        let curve = gap_curve_from_samples(&s, 5, &[0.0]);
        let parseable_avg = avg_from_samples(&s);
        assert_eq!(curve.len(), 1);
        assert!(curve[0].majority_accuracy == maj_from_samples(&s, 5) || curve[0].prompt_fraction < 1.0);
        assert!(curve[0].per_prompt_accuracy >= parseable_avg);
        let max_frac = s
            .iter()
            .map(|e| majority_vote(e.prompt_id, &e.answers, 5).majority_fraction)
            .fold(0.0, f64::max);
        let curve = gap_curve_from_samples(&s, 5, &[0.0, max_frac, max_frac + 1e-9, 0.0]);
        assert_eq!(curve.len(), 2);
    }

    #[test]
    fn evaluate_row_invariants() {
        let ds = generate_dataset(Family::NoisyEvidence, 3, 100, 5, 5, 5).unwrap();
        let base = PolicyParams::base(5, 5, &BaseInit::default());
        let r = evaluate(&base, &base, &ds, 16, 4, 0, 0.0).unwrap();
        assert_eq!(r.gv_gap, r.acc_ver - r.acc_gen);
        assert_eq!(r.kl_to_base, 0.0);
        for v in [r.avg_at_k, r.maj_at_k, r.pseudo_reward_mean, r.parseable_fraction, r.correct_of_parseable] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
