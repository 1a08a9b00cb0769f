//! Validator and Judge verdicts: discrete scores normalized to `[0, 1]` with
//! an attached sequence confidence.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::confidence::{
    confidence_of_emission, confidence_of_sampled_emission, SignalKind, TokenDistribution,
};
use crate::error::{Error, Result};
use crate::Role;

/// Inclusive integer score scale, `[1, 10]` by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreScale {
    pub min: i64,
    pub max: i64,
}

impl Default for ScoreScale {
    fn default() -> Self {
        Self { min: 1, max: 10 }
    }
}

impl ScoreScale {
    pub fn new(min: i64, max: i64) -> Result<Self> {
        let scale = Self { min, max };
        scale.validate()?;
        Ok(scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min >= self.max {
            return Err(Error::InvalidInput(format!(
                "score scale [{}, {}] must have min < max",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, raw: i64) -> bool {
        (self.min..=self.max).contains(&raw)
    }

    /// Width of the low and high rubric bands: 3 of 10 on the default scale.
    pub fn band_width(&self) -> usize {
        ((self.len() as f64 * 0.3).round() as usize).clamp(1, self.len() / 2)
    }

    /// Scores that signal an invalid question or an incorrect answer.
    pub fn low_band(&self) -> Range<i64> {
        self.min..self.min + self.band_width() as i64
    }

    /// Scores that signal a valid question or a correct answer.
    pub fn high_band(&self) -> Range<i64> {
        self.max + 1 - self.band_width() as i64..self.max + 1
    }

    /// Token index of a score inside a score-token vocabulary.
    pub fn token_of(&self, raw: i64) -> usize {
        (raw - self.min) as usize
    }

    pub fn score_of(&self, token: usize) -> i64 {
        self.min + token as i64
    }
}

/// Linear map of a discrete score onto `[0, 1]`.
pub fn normalize_score(raw: i64, scale: ScoreScale) -> Result<f64> {
    scale.validate()?;
    if !scale.contains(raw) {
        return Err(Error::ScoreOutOfRange {
            raw,
            min: scale.min,
            max: scale.max,
        });
    }
    Ok((raw - scale.min) as f64 / (scale.max - scale.min) as f64)
}

/// Which emitted positions feed the verdict confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceScope {
    #[default]
    FullEmission,
    ScoreSpan,
}

/// Unprocessed role output: the emitted score plus every next-token
/// distribution seen while generating it.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVerdict {
    pub role: Role,
    pub score: i64,
    pub scale: ScoreScale,
    pub emission: Vec<TokenDistribution>,
    /// Sampled token at each position; self-certainty falls back to the
    /// greedy token when absent.
    pub emitted: Option<Vec<usize>>,
    /// Positions of the score tokens within `emission`.
    pub score_span: Range<usize>,
    pub format_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResult {
    pub role: Role,
    pub normalized_score: f64,
    pub confidence: f64,
    pub format_ok: bool,
}

pub fn assess(raw: &RawVerdict, kind: SignalKind) -> Result<FeedbackResult> {
    assess_with_scope(raw, kind, ConfidenceScope::FullEmission)
}

pub fn assess_with_scope(
    raw: &RawVerdict,
    kind: SignalKind,
    scope: ConfidenceScope,
) -> Result<FeedbackResult> {
    if raw.emission.is_empty() {
        return Err(Error::InvalidInput("verdict has an empty emission".into()));
    }
    let span = match scope {
        ConfidenceScope::FullEmission => 0..raw.emission.len(),
        ConfidenceScope::ScoreSpan => {
            if raw.score_span.is_empty() || raw.score_span.end > raw.emission.len() {
                return Err(Error::InvalidInput(format!(
                    "score span {:?} not inside emission of length {}",
                    raw.score_span,
                    raw.emission.len()
                )));
            }
            raw.score_span.clone()
        }
    };
    let dists = &raw.emission[span.clone()];
    let trace = match &raw.emitted {
        Some(tokens) if tokens.len() == raw.emission.len() => {
            confidence_of_sampled_emission(dists, &tokens[span], kind)?
        }
        Some(tokens) => {
            return Err(Error::InvalidInput(format!(
                "{} emitted tokens for an emission of length {}",
                tokens.len(),
                raw.emission.len()
            )))
        }
        None => confidence_of_emission(dists, kind)?,
    };
    let normalized_score = if raw.format_ok {
        normalize_score(raw.score, raw.scale)?
    } else {
        0.0
    };
    Ok(FeedbackResult {
        role: raw.role,
        normalized_score,
        confidence: trace.sequence_confidence,
        format_ok: raw.format_ok,
    })
}

/// True iff `open` and `close` each occur exactly once, `open` first.
pub fn format_check<S: AsRef<str>>(tokens: &[S], open: &str, close: &str) -> bool {
    let positions = |tag: &str| {
        tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.as_ref() == tag)
            .map(|(i, _)| i)
            .collect::<Vec<_>>()
    };
    match (positions(open).as_slice(), positions(close).as_slice()) {
        ([o], [c]) => o < c,
        _ => false,
    }
}
