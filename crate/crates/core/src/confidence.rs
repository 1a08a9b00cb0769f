//! Token- and sequence-level confidence from next-token distributions.
//!
//! The default signal is normalized entropy, `1 - H(P) / ln|V|`, averaged over
//! every generated position. The alternative signals exist for the
//! signal-sweep experiment; each maps a uniform distribution to 0 and a
//! one-hot distribution to 1.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on `sum(probs) == 1`.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// One next-token probability vector over a vocabulary of at least two tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "vocabulary size {} < 2",
                probs.len()
            )));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::InvalidInput(format!(
                "probability {p} at index {i} outside [0, 1]"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(vocab: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::InvalidInput(format!("vocabulary size {vocab} < 2")));
        }
        Self::new(vec![1.0 / vocab as f64; vocab])
    }

    pub fn one_hot(vocab: usize, index: usize) -> Result<Self> {
        if index >= vocab {
            return Err(Error::InvalidInput(format!(
                "one-hot index {index} outside vocabulary of {vocab}"
            )));
        }
        let mut probs = vec![0.0; vocab];
        probs[index] = 1.0;
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    /// Shannon entropy in nats, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Largest and second-largest probabilities.
    fn top_two(&self) -> (f64, f64) {
        let mut first = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for &p in &self.probs {
            if p > first {
                second = first;
                first = p;
            } else if p > second {
                second = p;
            }
        }
        (first, second)
    }

    fn normalized_entropy_confidence(&self) -> f64 {
        let max_entropy = (self.vocab_size() as f64).ln();
        (1.0 - self.entropy() / max_entropy).clamp(0.0, 1.0)
    }

    /// Maps `p` from `[1/|V|, 1]` onto `[0, 1]`, flooring anything below chance.
    fn rescale_above_chance(&self, p: f64) -> f64 {
        let chance = 1.0 / self.vocab_size() as f64;
        ((p - chance) / (1.0 - chance)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    #[default]
    NormalizedEntropy,
    SelfCertainty,
    Margin,
    MaxProb,
    NegEntropy,
}

impl SignalKind {
    pub const ALL: [SignalKind; 5] = [
        SignalKind::NormalizedEntropy,
        SignalKind::SelfCertainty,
        SignalKind::Margin,
        SignalKind::MaxProb,
        SignalKind::NegEntropy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SignalKind::NormalizedEntropy => "normalized_entropy",
            SignalKind::SelfCertainty => "self_certainty",
            SignalKind::Margin => "margin",
            SignalKind::MaxProb => "max_prob",
            SignalKind::NegEntropy => "neg_entropy",
        }
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SignalKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown signal kind `{s}`")))
    }
}

/// Per-token confidences and their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTrace {
    pub token_confidences: Vec<f64>,
    pub sequence_confidence: f64,
}

/// Confidence of one distribution. Self-certainty scores the greedy token
/// here; use [`emitted_token_confidence`] when the sampled token is known.
pub fn token_confidence(dist: &TokenDistribution, kind: SignalKind) -> f64 {
    match kind {
        SignalKind::NormalizedEntropy | SignalKind::NegEntropy => {
            dist.normalized_entropy_confidence()
        }
        SignalKind::Margin => {
            let (first, second) = dist.top_two();
            (first - second).clamp(0.0, 1.0)
        }
        SignalKind::MaxProb | SignalKind::SelfCertainty => {
            let (first, _) = dist.top_two();
            dist.rescale_above_chance(first)
        }
    }
}

pub fn emitted_token_confidence(
    dist: &TokenDistribution,
    emitted: usize,
    kind: SignalKind,
) -> Result<f64> {
    match kind {
        SignalKind::SelfCertainty => {
            let p = dist.probs().get(emitted).copied().ok_or_else(|| {
                Error::InvalidInput(format!(
                    "emitted token {emitted} outside vocabulary of {}",
                    dist.vocab_size()
                ))
            })?;
            Ok(dist.rescale_above_chance(p))
        }
        _ => Ok(token_confidence(dist, kind)),
    }
}

/// Arithmetic mean of token confidences.
pub fn sequence_confidence(trace: &[f64]) -> Result<f64> {
    validate_trace(trace)?;
    Ok(trace.iter().sum::<f64>() / trace.len() as f64)
}

/// Kind-specific aggregation: mean for most kinds, minimum for
/// `neg_entropy` and geometric mean for `self_certainty`.
pub fn aggregate(trace: &[f64], kind: SignalKind) -> Result<f64> {
    validate_trace(trace)?;
    Ok(match kind {
        SignalKind::NegEntropy => trace.iter().copied().fold(f64::INFINITY, f64::min),
        SignalKind::SelfCertainty => {
            if trace.contains(&0.0) {
                0.0
            } else {
                let mean_log = trace.iter().map(|c| c.ln()).sum::<f64>() / trace.len() as f64;
                mean_log.exp().clamp(0.0, 1.0)
            }
        }
        _ => sequence_confidence(trace)?,
    })
}

fn validate_trace(trace: &[f64]) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::InvalidInput("empty confidence trace".into()));
    }
    if let Some((i, c)) = trace
        .iter()
        .enumerate()
        .find(|(_, c)| !(0.0..=1.0).contains(*c))
    {
        return Err(Error::InvalidToken {
            position: i,
            reason: format!("confidence {c} outside [0, 1]"),
        });
    }
    Ok(())
}

/// Scores every position of a generated sequence with the greedy token.
pub fn confidence_of_emission(
    dists: &[TokenDistribution],
    kind: SignalKind,
) -> Result<ConfidenceTrace> {
    if dists.is_empty() {
        return Err(Error::InvalidInput("empty emission".into()));
    }
    let token_confidences: Vec<f64> = dists.iter().map(|d| token_confidence(d, kind)).collect();
    let sequence_confidence = aggregate(&token_confidences, kind)?;
    Ok(ConfidenceTrace {
        token_confidences,
        sequence_confidence,
    })
}

/// Like [`confidence_of_emission`] but with the tokens actually sampled.
pub fn confidence_of_sampled_emission(
    dists: &[TokenDistribution],
    emitted: &[usize],
    kind: SignalKind,
) -> Result<ConfidenceTrace> {
    if dists.is_empty() {
        return Err(Error::InvalidInput("empty emission".into()));
    }
    if dists.len() != emitted.len() {
        return Err(Error::InvalidInput(format!(
            "{} distributions but {} emitted tokens",
            dists.len(),
            emitted.len()
        )));
    }
    let token_confidences = dists
        .iter()
        .zip(emitted)
        .enumerate()
        .map(|(position, (d, &e))| {
            emitted_token_confidence(d, e, kind).map_err(|err| Error::InvalidToken {
                position,
                reason: err.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sequence_confidence = aggregate(&token_confidences, kind)?;
    Ok(ConfidenceTrace {
        token_confidences,
        sequence_confidence,
    })
}
