//! Rewards: ground-truth verification, majority-vote pseudo-labels and
//! KL-shaped rewards.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::policy::{sample_rollouts, PolicyError, PolicyParams, Rollout};
use crate::rng::{self, Purpose};
use crate::task_env::{Dataset, Prompt};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("pseudo-label for prompt {0} abstained; abstaining prompts must be filtered before scoring")]
    Abstain(u64),
    #[error("offline label table has no entry for prompt {0}")]
    MissingLabel(u64),
    #[error("length mismatch: {0} rewards vs {1} KL estimates")]
    LengthMismatch(usize, usize),
    #[error("KL coefficient must be non-negative, got {0}")]
    NegativeBeta(f64),
    #[error("malformed label table at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub prompt_id: u64,
    /// `None` means ABSTAIN: no parseable answer was available to vote on.
    pub label: Option<usize>,
    pub majority_fraction: f64,
    /// Counts over parseable answers only.
    pub vote_counts: BTreeMap<usize, usize>,
}

impl PseudoLabel {
    pub fn is_abstain(&self) -> bool {
        self.label.is_none()
    }

    fn fixed(prompt_id: u64, label: Option<usize>, majority_fraction: f64) -> Self {
        PseudoLabel {
            prompt_id,
            label,
            majority_fraction,
            vote_counts: BTreeMap::new(),
        }
    }
}

/// Plurality over parseable answers (`< k`). Ties go to the smallest answer.
pub fn majority_vote(prompt_id: u64, answers: &[usize], k: usize) -> PseudoLabel {
    let mut vote_counts = BTreeMap::new();
    for &a in answers.iter().filter(|&&a| a < k) {
        *vote_counts.entry(a).or_insert(0usize) += 1;
    }
    let parseable: usize = vote_counts.values().sum();
    // BTreeMap iterates in ascending answer order, so the first maximum wins
    let best = vote_counts
        .iter()
        .fold(None, |best: Option<(usize, usize)>, (&a, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((a, c)),
        });
    match best {
        Some((label, count)) => PseudoLabel {
            prompt_id,
            label: Some(label),
            majority_fraction: count as f64 / parseable as f64,
            vote_counts,
        },
        None => PseudoLabel {
            prompt_id,
            label: None,
            majority_fraction: 0.0,
            vote_counts,
        },
    }
}

pub fn ground_truth_reward(rollout: &Rollout, prompt: &Prompt) -> f64 {
    if rollout.parseable && rollout.answer == prompt.correct_answer {
        1.0
    } else {
        0.0
    }
}

pub fn srt_reward(rollout: &Rollout, pseudo_label: &PseudoLabel) -> Result<f64, RewardError> {
    let label = pseudo_label
        .label
        .ok_or(RewardError::Abstain(pseudo_label.prompt_id))?;
    Ok(if rollout.parseable && rollout.answer == label {
        1.0
    } else {
        0.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    GroundTruth,
    SelfCurrent,
    FixedTeacher,
    Offline,
}

impl FromStr for LabelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "GroundTruth" | "ground-truth" => Ok(LabelMode::GroundTruth),
            "SelfCurrent" | "self-current" => Ok(LabelMode::SelfCurrent),
            "FixedTeacher" | "fixed-teacher" => Ok(LabelMode::FixedTeacher),
            "Offline" | "offline" => Ok(LabelMode::Offline),
            other => Err(format!("unknown label mode `{other}`")),
        }
    }
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LabelMode::GroundTruth => "GroundTruth",
            LabelMode::SelfCurrent => "SelfCurrent",
            LabelMode::FixedTeacher => "FixedTeacher",
            LabelMode::Offline => "Offline",
        };
        f.write_str(s)
    }
}

/// Precomputed pseudo-labels keyed by prompt id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelTable {
    pub entries: BTreeMap<u64, (Option<usize>, f64)>,
}

impl LabelTable {
    pub fn covers(&self, dataset: &Dataset) -> bool {
        dataset.prompts.iter().all(|p| self.entries.contains_key(&p.id))
    }
}

/// Where pseudo-labels come from.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelSource {
    GroundTruth,
    /// Vote over the current policy's own training rollouts.
    SelfCurrent { n_label: usize },
    /// Vote over fresh rollouts of a frozen teacher.
    FixedTeacher { teacher: PolicyParams, n_label: usize },
    Offline { table: LabelTable },
}

impl LabelSource {
    pub fn mode(&self) -> LabelMode {
        match self {
            LabelSource::GroundTruth => LabelMode::GroundTruth,
            LabelSource::SelfCurrent { .. } => LabelMode::SelfCurrent,
            LabelSource::FixedTeacher { .. } => LabelMode::FixedTeacher,
            LabelSource::Offline { .. } => LabelMode::Offline,
        }
    }
}

/// Derives the pseudo-label for `prompt` and returns the rollouts that were
/// voted on. With `SelfCurrent`, passing the training rollouts as `reuse`
/// means no extra samples are drawn.
pub fn make_labels<R: Rng + ?Sized>(
    source: &LabelSource,
    prompt: &Prompt,
    current: &PolicyParams,
    rng: &mut R,
    reuse: Option<&[Rollout]>,
) -> Result<(PseudoLabel, Vec<Rollout>), RewardError> {
    let k = current.k;
    match source {
        LabelSource::GroundTruth => Ok((
            PseudoLabel {
                prompt_id: prompt.id,
                label: Some(prompt.correct_answer),
                majority_fraction: 1.0,
                vote_counts: BTreeMap::new(),
            },
            Vec::new(),
        )),
        LabelSource::SelfCurrent { n_label } => {
            let rollouts = match reuse {
                Some(r) => r.to_vec(),
                None => sample_rollouts(current, prompt, *n_label, rng)?,
            };
            let answers: Vec<usize> = rollouts.iter().map(|r| r.answer).collect();
            Ok((majority_vote(prompt.id, &answers, k), rollouts))
        }
        LabelSource::FixedTeacher { teacher, n_label } => {
            let rollouts = sample_rollouts(teacher, prompt, *n_label, rng)?;
            let answers: Vec<usize> = rollouts.iter().map(|r| r.answer).collect();
            Ok((majority_vote(prompt.id, &answers, k), rollouts))
        }
        LabelSource::Offline { table } => {
            let &(label, frac) = table
                .entries
                .get(&prompt.id)
                .ok_or(RewardError::MissingLabel(prompt.id))?;
            Ok((PseudoLabel::fixed(prompt.id, label, frac), Vec::new()))
        }
    }
}

/// `r_i - beta * k3_i`.
pub fn apply_kl_in_reward(rewards: &[f64], kl_estimates: &[f64], beta: f64) -> Result<Vec<f64>, RewardError> {
    if rewards.len() != kl_estimates.len() {
        return Err(RewardError::LengthMismatch(rewards.len(), kl_estimates.len()));
    }
    if beta.is_nan() || beta < 0.0 {
        return Err(RewardError::NegativeBeta(beta));
    }
    Ok(rewards
        .iter()
        .zip(kl_estimates)
        .map(|(r, k)| r - beta * k)
        .collect())
}

/// Runs frozen-teacher voting over every prompt of `dataset`.
pub fn build_label_table(
    teacher: &PolicyParams,
    dataset: &Dataset,
    n_label: usize,
    seed: u64,
) -> Result<LabelTable, RewardError> {
    let source = LabelSource::FixedTeacher {
        teacher: teacher.clone(),
        n_label,
    };
    let mut table = LabelTable::default();
    for prompt in &dataset.prompts {
        let mut stream = rng::stream(seed, Purpose::Teacher, &[u64::MAX, prompt.id]);
        let (label, _) = make_labels(&source, prompt, teacher, &mut stream, None)?;
        table
            .entries
            .insert(prompt.id, (label.label, label.majority_fraction));
    }
    Ok(table)
}

const LABELS_MAGIC: &str = "# srt-labels v1";

pub fn write_label_table(table: &LabelTable) -> String {
    let mut out = String::from(LABELS_MAGIC);
    out.push('\n');
    for (id, (label, frac)) in &table.entries {
        let label = label.map_or_else(|| "abstain".to_string(), |l| l.to_string());
        out.push_str(&format!("{id} {label} {frac:.12e}\n"));
    }
    out
}

pub fn read_label_table(text: &str) -> Result<LabelTable, RewardError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == LABELS_MAGIC => {}
        _ => {
            return Err(RewardError::Parse {
                line: 1,
                reason: "missing header".into(),
            })
        }
    }
    let mut table = LabelTable::default();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| RewardError::Parse {
            line: i + 1,
            reason: reason.into(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(bad("expected `prompt_id label majority_fraction`"));
        }
        let id: u64 = fields[0].parse().map_err(|_| bad("bad prompt id"))?;
        let label = match fields[1] {
            "abstain" => None,
            s => Some(s.parse::<usize>().map_err(|_| bad("bad label"))?),
        };
        let frac: f64 = fields[2].parse().map_err(|_| bad("bad fraction"))?;
        if !(0.0..=1.0).contains(&frac) {
            return Err(bad("fraction outside [0, 1]"));
        }
        table.entries.insert(id, (label, frac));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::BaseInit;
    use crate::task_env::{generate_dataset, Family};

    #[test]
    fn vote_examples() {
        let v = majority_vote(0, &[0, 0, 1], 3);
        assert_eq!(v.label, Some(0));
        assert!((v.majority_fraction - 2.0 / 3.0).abs() < 1e-15);

        let k = 3;
        let v = majority_vote(0, &[2, k, 1, 1], k);
        assert_eq!(v.label, Some(1));
        assert!((v.majority_fraction - 2.0 / 3.0).abs() < 1e-15);
        assert!(!v.vote_counts.contains_key(&k));

        assert_eq!(majority_vote(0, &[0, 1], 3).label, Some(0));
        assert_eq!(majority_vote(0, &[1, 0], 3).label, Some(0));

        let abstain = majority_vote(9, &[3, 3], 3);
        assert!(abstain.is_abstain());
        assert_eq!(abstain.majority_fraction, 0.0);
    }

    fn rollout(answer: usize, k: usize) -> Rollout {
        Rollout {
            prompt_id: 0,
            answer,
            logprob: 0.0,
            parseable: answer != k,
        }
    }

    #[test]
    fn reward_functions() {
        let prompt = Prompt {
            id: 0,
            features: vec![1.0, 0.0, 0.0],
            correct_answer: 2,
            level: 1,
            family: Family::NoisyEvidence,
        };
        assert_eq!(ground_truth_reward(&rollout(2, 3), &prompt), 1.0);
        assert_eq!(ground_truth_reward(&rollout(1, 3), &prompt), 0.0);
        assert_eq!(ground_truth_reward(&rollout(3, 3), &prompt), 0.0);

        let label = majority_vote(0, &[1, 1, 0], 3);
        assert_eq!(srt_reward(&rollout(1, 3), &label), Ok(1.0));
        assert_eq!(srt_reward(&rollout(0, 3), &label), Ok(0.0));
        let abstain = majority_vote(0, &[3], 3);
        assert_eq!(srt_reward(&rollout(3, 3), &abstain), Err(RewardError::Abstain(0)));
    }

    #[test]
    fn kl_shaping() {
        assert_eq!(apply_kl_in_reward(&[1.0, 0.0], &[0.3, 0.7], 0.0).unwrap(), vec![1.0, 0.0]);
        let shaped = apply_kl_in_reward(&[1.0], &[0.306853], 0.001).unwrap();
        assert!((shaped[0] - 0.999693).abs() < 1e-6);
        assert_eq!(
            apply_kl_in_reward(&[1.0], &[], 0.1),
            Err(RewardError::LengthMismatch(1, 0))
        );
        assert!(apply_kl_in_reward(&[1.0], &[0.0], -1.0).is_err());
    }

    #[test]
    fn label_sources() {
        let ds = generate_dataset(Family::NoisyEvidence, 1, 3, 3, 3, 1).unwrap();
        let prompt = &ds.prompts[0];
        let current = PolicyParams::base(3, 3, &BaseInit::default());
        let mut rng = rng::stream(0, Purpose::Teacher, &[]);

        let (gt, used) = make_labels(&LabelSource::GroundTruth, prompt, &current, &mut rng, None).unwrap();
        assert_eq!((gt.label, gt.majority_fraction), (Some(prompt.correct_answer), 1.0));
        assert!(used.is_empty());

        let reuse = vec![rollout(1, 3), rollout(1, 3), rollout(0, 3)];
        let before = rng.clone();
        let (lab, used) = make_labels(
            &LabelSource::SelfCurrent { n_label: 3 },
            prompt,
            &current,
            &mut rng,
            Some(&reuse),
        )
        .unwrap();
        assert_eq!(lab.label, Some(1));
        assert_eq!(used, reuse);
        // no draws were taken from the stream
        assert_eq!(rng, before);

        let mut teacher = PolicyParams::zeros(3, 3, 1.0);
        teacher.bias = vec![0.0, 0.0, 900.0, 0.0];
        let src = LabelSource::FixedTeacher { teacher, n_label: 7 };
        let (lab, used) = make_labels(&src, prompt, &current, &mut rng, None).unwrap();
        assert_eq!(lab.label, Some(2));
        assert_eq!(used.len(), 7);

        let mut table = LabelTable::default();
        table.entries.insert(prompt.id, (Some(1), 0.75));
        let src = LabelSource::Offline { table };
        let (lab, _) = make_labels(&src, prompt, &current, &mut rng, None).unwrap();
        assert_eq!((lab.label, lab.majority_fraction), (Some(1), 0.75));
        assert_eq!(
            make_labels(&src, &ds.prompts[1], &current, &mut rng, None),
            Err(RewardError::MissingLabel(ds.prompts[1].id))
        );
    }

    #[test]
    fn label_table_file_round_trip() {
        let ds = generate_dataset(Family::NoisyEvidence, 3, 20, 4, 4, 8).unwrap();
        let teacher = PolicyParams::base(4, 4, &BaseInit::default());
        let table = build_label_table(&teacher, &ds, 16, 3).unwrap();
        assert!(table.covers(&ds));
        let text = write_label_table(&table);
        let back = read_label_table(&text).unwrap();
        assert_eq!(write_label_table(&back), text);
        assert_eq!(back.entries.len(), 20);
        assert!(read_label_table("0 1 0.5\n").is_err());
        assert!(read_label_table("# srt-labels v1\n0 x 0.5\n").is_err());
    }
}
