//! Synthetic prompt families with adjustable difficulty, curriculum subsets
//! and validation splits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rewards::majority_vote;
use crate::rng::{self, Purpose};

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("unknown task family `{0}`")]
    UnknownFamily(String),
    #[error("invalid dataset argument: {0}")]
    InvalidArgument(String),
    #[error("prompt {0} has no rollouts in the log")]
    MissingRollouts(u64),
    #[error("curriculum subset would be empty")]
    EmptySubset,
    #[error("malformed dataset file at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Features are the one-hot correct answer plus level-scaled Gaussian noise.
    NoisyEvidence,
    /// Features are normalized symbol counts; the answer is their unique mode.
    Plurality,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::NoisyEvidence => write!(f, "NoisyEvidence"),
            Family::Plurality => write!(f, "Plurality"),
        }
    }
}

impl FromStr for Family {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "NoisyEvidence" | "noisy-evidence" | "noisy_evidence" => Ok(Family::NoisyEvidence),
            "Plurality" | "plurality" => Ok(Family::Plurality),
            other => Err(TaskError::UnknownFamily(other.to_string())),
        }
    }
}

/// Maps a difficulty level to generator parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Difficulty {
    /// NoisyEvidence noise scale per level.
    pub noise_per_level: f64,
    /// Plurality draw length at level 0.
    pub plurality_base: u32,
    /// Extra Plurality draws per level.
    pub plurality_per_level: u32,
}

impl Default for Difficulty {
    fn default() -> Self {
        Difficulty {
            noise_per_level: 0.25,
            plurality_base: 4,
            plurality_per_level: 2,
        }
    }
}

impl Difficulty {
    pub fn noise(&self, level: u32) -> f64 {
        self.noise_per_level * level as f64
    }

    pub fn draw_length(&self, level: u32) -> u32 {
        self.plurality_base + self.plurality_per_level * level
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub id: u64,
    pub features: Vec<f64>,
    pub correct_answer: usize,
    pub level: u32,
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub prompts: Vec<Prompt>,
    pub family: Family,
    pub level: u32,
    pub seed: u64,
    pub alphabet_size: usize,
    pub dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.prompts.iter().map(|p| p.id).collect()
    }

    fn with_prompts(&self, prompts: Vec<Prompt>) -> Dataset {
        Dataset {
            prompts,
            family: self.family,
            level: self.level,
            seed: self.seed,
            alphabet_size: self.alphabet_size,
            dim: self.dim,
        }
    }
}

pub fn generate_dataset(
    family: Family,
    level: u32,
    size: usize,
    k: usize,
    d: usize,
    seed: u64,
) -> Result<Dataset, TaskError> {
    generate_dataset_with(&Difficulty::default(), family, level, size, k, d, seed)
}

/// Generates `size` prompts. Each prompt draws from its own stream keyed by
/// `(seed, id)`, so prompt `i` is the same regardless of `size`.
pub fn generate_dataset_with(
    difficulty: &Difficulty,
    family: Family,
    level: u32,
    size: usize,
    k: usize,
    d: usize,
    seed: u64,
) -> Result<Dataset, TaskError> {
    if size == 0 {
        return Err(TaskError::InvalidArgument("size must be at least 1".into()));
    }
    if level == 0 {
        return Err(TaskError::InvalidArgument("level must be at least 1".into()));
    }
    if k < 2 {
        return Err(TaskError::InvalidArgument("alphabet size K must be at least 2".into()));
    }
    if d != k {
        return Err(TaskError::InvalidArgument(format!(
            "feature dimension must equal K for {family} (got d={d}, K={k})"
        )));
    }
    if family == Family::Plurality && difficulty.draw_length(level) == 0 {
        return Err(TaskError::InvalidArgument("plurality draw length is zero".into()));
    }
    let prompts = (0..size as u64)
        .map(|id| {
            let mut rng = rng::stream(seed, Purpose::Dataset, &[id]);
            match family {
                Family::NoisyEvidence => {
                    let sigma = difficulty.noise(level);
                    let correct = rng.gen_range(0..k);
                    let features = (0..k)
                        .map(|j| {
                            let g: f64 = rng.sample(StandardNormal);
                            let hot = if j == correct { 1.0 } else { 0.0 };
                            hot + sigma * g
                        })
                        .collect();
                    Prompt {
                        id,
                        features,
                        correct_answer: correct,
                        level,
                        family,
                    }
                }
                Family::Plurality => {
                    let len = difficulty.draw_length(level);
                    loop {
                        let mut counts = vec![0u32; k];
                        for _ in 0..len {
                            counts[rng.gen_range(0..k)] += 1;
                        }
                        let max = *counts.iter().max().expect("k >= 2");
                        if counts.iter().filter(|&&c| c == max).count() != 1 {
                            continue;
                        }
                        let correct = counts.iter().position(|&c| c == max).expect("max exists");
                        let features = counts.iter().map(|&c| c as f64 / len as f64).collect();
                        break Prompt {
                            id,
                            features,
                            correct_answer: correct,
                            level,
                            family,
                        };
                    }
                }
            }
        })
        .collect();
    Ok(Dataset {
        prompts,
        family,
        level,
        seed,
        alphabet_size: k,
        dim: d,
    })
}

/// Sampled answers per prompt id, used to score prompts for curricula.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutLog {
    pub answers: BTreeMap<u64, Vec<usize>>,
}

impl RolloutLog {
    pub fn insert(&mut self, prompt_id: u64, answers: Vec<usize>) {
        self.answers.insert(prompt_id, answers);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurriculumCriterion {
    /// Fraction of rollouts matching the ground truth.
    PassRate,
    /// Modal-answer fraction among parseable rollouts; needs no labels.
    MajorityFrequency,
}

impl FromStr for CurriculumCriterion {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "PassRate" | "pass-rate" | "pass_rate" => Ok(CurriculumCriterion::PassRate),
            "MajorityFrequency" | "majority-frequency" | "majority_frequency" => {
                Ok(CurriculumCriterion::MajorityFrequency)
            }
            other => Err(TaskError::InvalidArgument(format!("unknown curriculum criterion `{other}`"))),
        }
    }
}

impl fmt::Display for CurriculumCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CurriculumCriterion::PassRate => write!(f, "PassRate"),
            CurriculumCriterion::MajorityFrequency => write!(f, "MajorityFrequency"),
        }
    }
}

pub fn curriculum_score(
    prompt: &Prompt,
    answers: &[usize],
    k: usize,
    criterion: CurriculumCriterion,
) -> f64 {
    match criterion {
        CurriculumCriterion::PassRate => {
            let hits = answers.iter().filter(|&&a| a == prompt.correct_answer).count();
            hits as f64 / answers.len() as f64
        }
        CurriculumCriterion::MajorityFrequency => majority_vote(prompt.id, answers, k).majority_fraction,
    }
}

/// Keeps the `ceil(keep_fraction * N)` highest-scoring prompts, sorted by
/// descending score with ties broken by ascending id.
pub fn curriculum_subset(
    dataset: &Dataset,
    log: &RolloutLog,
    criterion: CurriculumCriterion,
    keep_fraction: f64,
) -> Result<Dataset, TaskError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(TaskError::InvalidArgument(format!(
            "keep_fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    let mut scored = Vec::with_capacity(dataset.len());
    for prompt in &dataset.prompts {
        let answers = log
            .answers
            .get(&prompt.id)
            .filter(|a| !a.is_empty())
            .ok_or(TaskError::MissingRollouts(prompt.id))?;
        let score = curriculum_score(prompt, answers, dataset.alphabet_size, criterion);
        scored.push((score, prompt));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
    let keep = (keep_fraction * dataset.len() as f64).ceil() as usize;
    let keep = keep.min(dataset.len());
    if keep == 0 {
        return Err(TaskError::EmptySubset);
    }
    let prompts = scored.into_iter().take(keep).map(|(_, p)| p.clone()).collect();
    Ok(dataset.with_prompts(prompts))
}

/// Splits off a validation set of `max(1, floor(fraction * N))` prompts.
/// Returns `(train, validation)`, each in the original prompt order.
pub fn split_validation(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), TaskError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TaskError::InvalidArgument(format!(
            "validation fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(TaskError::InvalidArgument("need at least two prompts to split".into()));
    }
    let n_val = ((fraction * n as f64).floor() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, &[n as u64]));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (val, train): (Vec<_>, Vec<_>) = dataset
        .prompts
        .iter()
        .cloned()
        .zip(is_val)
        .partition(|(_, v)| *v);
    Ok((
        dataset.with_prompts(train.into_iter().map(|(p, _)| p).collect()),
        dataset.with_prompts(val.into_iter().map(|(p, _)| p).collect()),
    ))
}

const DATASET_MAGIC: &str = "# srt-dataset v1";

/// Renders the line-oriented dataset file. Features use 9 significant digits.
pub fn export_dataset(dataset: &Dataset) -> String {
    let mut out = String::new();
    out.push_str(DATASET_MAGIC);
    out.push('\n');
    out.push_str(&format!(
        "family={} level={} K={} d={} seed={} size={}\n",
        dataset.family,
        dataset.level,
        dataset.alphabet_size,
        dataset.dim,
        dataset.seed,
        dataset.len()
    ));
    for p in &dataset.prompts {
        let feats: Vec<String> = p.features.iter().map(|x| format!("{x:.8e}")).collect();
        out.push_str(&format!("{} {} {}\n", p.id, p.correct_answer, feats.join(",")));
    }
    out
}

pub fn import_dataset(text: &str) -> Result<Dataset, TaskError> {
    let err = |line: usize, reason: &str| TaskError::Parse {
        line,
        reason: reason.to_string(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == DATASET_MAGIC => {}
        _ => return Err(err(1, "missing dataset header")),
    }
    let (_, header) = lines.next().ok_or_else(|| err(2, "missing metadata line"))?;
    let mut meta = BTreeMap::new();
    for field in header.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| err(2, "expected key=value"))?;
        meta.insert(key, value);
    }
    let get = |key: &str| meta.get(key).copied().ok_or_else(|| err(2, &format!("missing `{key}`")));
    let family: Family = get("family")?.parse()?;
    let parse_num = |key: &str| -> Result<u64, TaskError> {
        get(key)?.parse::<u64>().map_err(|_| err(2, &format!("bad `{key}`")))
    };
    let level = parse_num("level")? as u32;
    let k = parse_num("K")? as usize;
    let dim = parse_num("d")? as usize;
    let seed = parse_num("seed")?;
    let size = parse_num("size")? as usize;

    let mut prompts = Vec::with_capacity(size);
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id: u64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(lineno, "bad prompt id"))?;
        let correct: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(lineno, "bad correct answer"))?;
        let features: Vec<f64> = parts
            .next()
            .ok_or_else(|| err(lineno, "missing features"))?
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| err(lineno, "bad feature value"))?;
        if features.len() != dim || features.iter().any(|x| !x.is_finite()) {
            return Err(err(lineno, "feature vector has wrong length or non-finite entries"));
        }
        if correct >= k {
            return Err(err(lineno, "correct answer out of range"));
        }
        if !seen.insert(id) {
            return Err(err(lineno, "duplicate prompt id"));
        }
        prompts.push(Prompt {
            id,
            features,
            correct_answer: correct,
            level,
            family,
        });
    }
    if prompts.len() != size {
        return Err(err(2, "size does not match number of prompt lines"));
    }
    Ok(Dataset {
        prompts,
        family,
        level,
        seed,
        alphabet_size: k,
        dim,
    })
}
