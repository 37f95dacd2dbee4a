//! Temperature-scaled categorical softmax policy over `K` answers plus one
//! malformed symbol (index `K`).

use rand::Rng;
use thiserror::Error;

use crate::task_env::Prompt;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("feature dimension {got} does not match policy dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("answer {answer} out of range for alphabet of size {k}")]
    AnswerOutOfRange { answer: usize, k: usize },
    #[error("reference policy assigns zero probability to a sampled answer")]
    DegenerateReference,
    #[error("rollout count must be at least 1")]
    EmptyRollouts,
    #[error("invalid policy parameters: {0}")]
    InvalidParams(String),
}

/// Starting-policy shape: `W = scale * [I | 0-row]`, `b = (0, ..., 0, malformed_bias)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseInit {
    pub scale: f64,
    pub malformed_bias: f64,
    pub temperature: f64,
}

impl Default for BaseInit {
    fn default() -> Self {
        BaseInit {
            scale: 2.0,
            malformed_bias: -2.0,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// Number of real answers; the malformed symbol is index `k`.
    pub k: usize,
    pub dim: usize,
    /// Row-major `(k + 1) x dim`.
    pub weights: Vec<f64>,
    /// Length `k + 1`.
    pub bias: Vec<f64>,
    pub temperature: f64,
}

impl PolicyParams {
    pub fn zeros(k: usize, dim: usize, temperature: f64) -> Self {
        PolicyParams {
            k,
            dim,
            weights: vec![0.0; (k + 1) * dim],
            bias: vec![0.0; k + 1],
            temperature,
        }
    }

    pub fn base(k: usize, dim: usize, init: &BaseInit) -> Self {
        let mut p = Self::zeros(k, dim, init.temperature);
        for i in 0..k.min(dim) {
            p.weights[i * dim + i] = init.scale;
        }
        p.bias[k] = init.malformed_bias;
        p
    }

    pub fn num_actions(&self) -> usize {
        self.k + 1
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.weights.len() != (self.k + 1) * self.dim || self.bias.len() != self.k + 1 {
            return Err(PolicyError::InvalidParams("shape mismatch".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::InvalidParams("temperature must be positive".into()));
        }
        if self.weights.iter().chain(&self.bias).any(|x| !x.is_finite()) {
            return Err(PolicyError::InvalidParams("non-finite entries".into()));
        }
        Ok(())
    }

    pub fn row(&self, action: usize) -> &[f64] {
        &self.weights[action * self.dim..(action + 1) * self.dim]
    }

    /// Temperature-scaled logits `(W f + b) / T`.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>, PolicyError> {
        if features.len() != self.dim {
            return Err(PolicyError::DimensionMismatch {
                expected: self.dim,
                got: features.len(),
            });
        }
        let z: Vec<f64> = (0..self.num_actions())
            .map(|a| {
                let dot: f64 = self.row(a).iter().zip(features).map(|(w, x)| w * x).sum();
                (dot + self.bias[a]) / self.temperature
            })
            .collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFiniteLogits);
        }
        Ok(z)
    }

    pub fn action_distribution(&self, prompt: &Prompt) -> Result<Vec<f64>, PolicyError> {
        self.logits(&prompt.features).map(|z| softmax(&z))
    }

    pub fn log_prob(&self, prompt: &Prompt, answer: usize) -> Result<f64, PolicyError> {
        if answer > self.k {
            return Err(PolicyError::AnswerOutOfRange { answer, k: self.k });
        }
        let z = self.logits(&prompt.features)?;
        Ok(log_softmax(&z)[answer])
    }
}

/// Max-subtracted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Exact categorical entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Exact `KL(p || q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

pub fn action_distribution(params: &PolicyParams, prompt: &Prompt) -> Result<Vec<f64>, PolicyError> {
    params.action_distribution(prompt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt_id: u64,
    pub answer: usize,
    pub logprob: f64,
    pub parseable: bool,
}

/// Inverse-CDF draw from `probs` using one uniform variate.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn sample_rollouts<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &Prompt,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Rollout>, PolicyError> {
    if n == 0 {
        return Err(PolicyError::EmptyRollouts);
    }
    let z = params.logits(&prompt.features)?;
    let probs = softmax(&z);
    let logp = log_softmax(&z);
    Ok((0..n)
        .map(|_| {
            let answer = sample_index(&probs, rng);
            Rollout {
                prompt_id: prompt.id,
                answer,
                logprob: logp[answer],
                parseable: answer != params.k,
            }
        })
        .collect())
}

/// A direction in parameter space with the same shape as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Gradient {
            weights: vec![0.0; params.weights.len()],
            bias: vec![0.0; params.bias.len()],
        }
    }

    /// Adds `scale * dlogits` chained through the logit map at `features`.
    /// `dlogits` is the derivative with respect to the temperature-scaled logits.
    pub fn add_logit_grad(&mut self, dlogits: &[f64], features: &[f64], scale: f64, temperature: f64) {
        let dim = features.len();
        for (a, &g) in dlogits.iter().enumerate() {
            let c = scale * g / temperature;
            if c == 0.0 {
                continue;
            }
            self.bias[a] += c;
            for (w, &x) in self.weights[a * dim..(a + 1) * dim].iter_mut().zip(features) {
                *w += c * x;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.bias)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|&x| x == 0.0)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }
}

/// `d log pi(answer) / d logit_c = 1[c = answer] - pi(c)`.
pub fn logit_grad_logprob(probs: &[f64], answer: usize) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(c, &p)| if c == answer { 1.0 - p } else { -p })
        .collect()
}

pub fn grad_logprob(params: &PolicyParams, prompt: &Prompt, answer: usize) -> Result<Gradient, PolicyError> {
    if answer > params.k {
        return Err(PolicyError::AnswerOutOfRange { answer, k: params.k });
    }
    let probs = params.action_distribution(prompt)?;
    let mut g = Gradient::zeros_like(params);
    g.add_logit_grad(
        &logit_grad_logprob(&probs, answer),
        &prompt.features,
        1.0,
        params.temperature,
    );
    Ok(g)
}

/// Low-variance KL estimate `rho - 1 - ln rho` from a log ratio `ln rho`.
pub fn k3_from_log_ratio(log_ratio: f64) -> f64 {
    // expm1 keeps precision when the policies nearly agree
    log_ratio.exp_m1() - log_ratio
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlEstimates {
    pub per_rollout: Vec<f64>,
    pub mean: f64,
}

/// Per-rollout k3 estimates of `KL(pi || pi_ref)` with
/// `rho = pi_ref(y|x) / pi(y|x)`. `prompts` is looked up by rollout prompt id.
pub fn kl_to_reference(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    prompts: &[Prompt],
    rollouts: &[Rollout],
) -> Result<KlEstimates, PolicyError> {
    let mut per_rollout = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        let prompt = prompts
            .iter()
            .find(|p| p.id == r.prompt_id)
            .ok_or_else(|| PolicyError::InvalidParams(format!("no prompt with id {}", r.prompt_id)))?;
        let lp = params.log_prob(prompt, r.answer)?;
        let lp_ref = ref_params.log_prob(prompt, r.answer)?;
        let log_ratio = lp_ref - lp;
        let rho = log_ratio.exp();
        if !log_ratio.is_finite() || rho == 0.0 || !rho.is_finite() {
            return Err(PolicyError::DegenerateReference);
        }
        per_rollout.push(k3_from_log_ratio(log_ratio));
    }
    let mean = if per_rollout.is_empty() {
        0.0
    } else {
        per_rollout.iter().sum::<f64>() / per_rollout.len() as f64
    };
    Ok(KlEstimates { per_rollout, mean })
}

const CHECKPOINT_MAGIC: &str = "srt-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Versioned text checkpoint. Values use 17 significant digits, which is
/// enough for an exact `f64` round trip.
pub fn write_checkpoint(params: &PolicyParams) -> String {
    let fmt_row = |row: &[f64]| row.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ");
    let mut out = format!(
        "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\nK={} d={} temperature={:.16e}\n",
        params.k, params.dim, params.temperature
    );
    for a in 0..params.num_actions() {
        out.push_str("W ");
        out.push_str(&fmt_row(params.row(a)));
        out.push('\n');
    }
    out.push_str("b ");
    out.push_str(&fmt_row(&params.bias));
    out.push('\n');
    out
}

pub fn read_checkpoint(text: &str) -> Result<PolicyParams, PolicyError> {
    let bad = |m: &str| PolicyError::InvalidParams(format!("checkpoint: {m}"));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(&format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}")[..]) {
        return Err(bad("unsupported header"));
    }
    let header = lines.next().ok_or_else(|| bad("missing shape line"))?;
    let (mut k, mut dim, mut temperature) = (None, None, None);
    for field in header.split_whitespace() {
        match field.split_once('=') {
            Some(("K", v)) => k = v.parse::<usize>().ok(),
            Some(("d", v)) => dim = v.parse::<usize>().ok(),
            Some(("temperature", v)) => temperature = v.parse::<f64>().ok(),
            _ => return Err(bad("unexpected header field")),
        }
    }
    let (k, dim, temperature) = match (k, dim, temperature) {
        (Some(k), Some(d), Some(t)) => (k, d, t),
        _ => return Err(bad("incomplete shape line")),
    };
    let parse_row = |line: &str, tag: &str, len: usize| -> Result<Vec<f64>, PolicyError> {
        let rest = line.strip_prefix(tag).ok_or_else(|| bad("unexpected row tag"))?;
        let row: Vec<f64> = rest
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| bad("bad number"))?;
        if row.len() != len {
            return Err(bad("row length"));
        }
        Ok(row)
    };
    let mut weights = Vec::with_capacity((k + 1) * dim);
    for _ in 0..=k {
        weights.extend(parse_row(lines.next().ok_or_else(|| bad("missing W row"))?, "W", dim)?);
    }
    let bias = parse_row(lines.next().ok_or_else(|| bad("missing b row"))?, "b", k + 1)?;
    let params = PolicyParams {
        k,
        dim,
        weights,
        bias,
        temperature,
    };
    params.validate()?;
    Ok(params)
}
