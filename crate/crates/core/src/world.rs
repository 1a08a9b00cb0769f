//! Seedable synthetic world standing in for the four LLM roles.
//!
//! * Questions have a latent skill, a difficulty `d` and a latent validity;
//!   harder questions are more often invalid.
//! * The Solver succeeds with probability `sigmoid(theta_skill - logit(d))`.
//! * Validator and Judge report through a noisy-band channel. Each verdict
//!   draws its own noise level `eta` with mean `eps(d) = min(eps + lambda d, 0.5)`;
//!   the emitted score lands in the wrong rubric band with probability `eta`,
//!   and every emitted token's entropy grows with `eta`. Confidence therefore
//!   tracks the reliability of each individual verdict.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::TokenDistribution;
use crate::error::{Error, Result};
use crate::feedback::{format_check, RawVerdict, ScoreScale};
use crate::ppo::{Context, PolicyParams, PolicyToken};
use crate::replay::Payload;
use crate::Role;

pub const QUESTION_TAGS: (&str, &str) = ("<question>", "</question>");
pub const ANSWER_TAGS: (&str, &str) = ("<answer>", "</answer>");

/// Difficulties are clamped this far inside `(0, 1)` before taking logits.
const LOGIT_EPS: f64 = 1e-6;

pub fn logit(d: f64) -> f64 {
    let d = d.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (d / (1.0 - d)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub skill_dim: usize,
    pub difficulty_buckets: usize,
    pub difficulty_range: [f64; 2],
    /// Base Validator error rate `eps_V`.
    pub validator_noise: f64,
    /// Base Judge error rate `eps_J`.
    pub judge_noise: f64,
    /// `lambda`: extra error rate per unit difficulty.
    pub noise_difficulty_slope: f64,
    /// A question of difficulty `d` is invalid with probability `slope * d`.
    pub invalidity_slope: f64,
    /// How strongly per-verdict noise spreads around its mean: 0 gives every
    /// verdict the same noise level, 1 splits verdicts into noiseless and
    /// coin-flip ones.
    pub confidence_coupling: f64,
    pub score_scale: ScoreScale,
    /// Reasoning tokens emitted before the score token.
    pub reasoning_tokens: usize,
    pub reasoning_vocab: usize,
    /// Probability that a Proposer or Solver output carries its closing tag.
    pub format_rate: f64,
    pub probe_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::high_noise()
    }
}

impl WorldConfig {
    pub fn noiseless() -> Self {
        Self {
            skill_dim: 8,
            difficulty_buckets: 5,
            difficulty_range: [0.0, 1.0],
            validator_noise: 0.0,
            judge_noise: 0.0,
            noise_difficulty_slope: 0.0,
            invalidity_slope: 0.3,
            confidence_coupling: 1.0,
            score_scale: ScoreScale::default(),
            reasoning_tokens: 4,
            reasoning_vocab: 16,
            format_rate: 0.98,
            probe_size: 256,
        }
    }

    pub fn low_noise() -> Self {
        Self {
            validator_noise: 0.1,
            judge_noise: 0.1,
            noise_difficulty_slope: 0.1,
            ..Self::noiseless()
        }
    }

    pub fn high_noise() -> Self {
        Self {
            validator_noise: 0.3,
            judge_noise: 0.3,
            noise_difficulty_slope: 0.4,
            ..Self::noiseless()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let half = 0.0..=0.5;
        let unit = 0.0..=1.0;
        if self.skill_dim == 0 {
            return Err(Error::config("world.skill_dim", "must be at least 1"));
        }
        if self.difficulty_buckets == 0 {
            return Err(Error::config("world.difficulty_buckets", "must be at least 1"));
        }
        let [lo, hi] = self.difficulty_range;
        if !(unit.contains(&lo) && unit.contains(&hi) && lo <= hi) {
            return Err(Error::config(
                "world.difficulty_range",
                "must satisfy 0 <= lo <= hi <= 1",
            ));
        }
        if !half.contains(&self.validator_noise) {
            return Err(Error::config("world.validator_noise", "must lie in [0, 0.5]"));
        }
        if !half.contains(&self.judge_noise) {
            return Err(Error::config("world.judge_noise", "must lie in [0, 0.5]"));
        }
        if !(self.noise_difficulty_slope >= 0.0 && self.noise_difficulty_slope.is_finite()) {
            return Err(Error::config("world.noise_difficulty_slope", "must be >= 0"));
        }
        if !unit.contains(&self.invalidity_slope) {
            return Err(Error::config("world.invalidity_slope", "must lie in [0, 1]"));
        }
        if !unit.contains(&self.confidence_coupling) {
            return Err(Error::config("world.confidence_coupling", "must lie in [0, 1]"));
        }
        self.score_scale
            .validate()
            .map_err(|e| Error::config("world.score_scale", e.to_string()))?;
        if self.reasoning_vocab < 2 {
            return Err(Error::config("world.reasoning_vocab", "must be at least 2"));
        }
        if !unit.contains(&self.format_rate) {
            return Err(Error::config("world.format_rate", "must lie in [0, 1]"));
        }
        if self.probe_size == 0 {
            return Err(Error::config("world.probe_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn bucket_difficulty(&self, bucket: usize) -> f64 {
        let [lo, hi] = self.difficulty_range;
        lo + (hi - lo) * (bucket as f64 + 0.5) / self.difficulty_buckets as f64
    }

    /// Number of Proposer actions: one per `(skill, bucket)` pair.
    pub fn proposal_actions(&self) -> usize {
        self.skill_dim * self.difficulty_buckets
    }

    pub fn validity_probability(&self, d: f64) -> f64 {
        (1.0 - self.invalidity_slope * d).clamp(0.0, 1.0)
    }

    pub fn effective_noise(&self, base: f64, d: f64) -> f64 {
        (base + self.noise_difficulty_slope * d).min(0.5)
    }

    pub fn validator_error_rate(&self, d: f64) -> f64 {
        self.effective_noise(self.validator_noise, d)
    }

    pub fn judge_error_rate(&self, d: f64) -> f64 {
        self.effective_noise(self.judge_noise, d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuestion {
    pub id: u64,
    pub skill_index: usize,
    pub bucket: usize,
    pub difficulty: f64,
    /// Latent ground truth, never shown to the learner.
    pub valid: bool,
    pub format_ok: bool,
}

impl SyntheticQuestion {
    /// Solver context: the skill row, with `logit(d)` added to the failure action.
    pub fn solver_context(&self) -> Context {
        Context::with_offset(self.skill_index, vec![0.0, logit(self.difficulty)])
    }
}

impl Payload for SyntheticQuestion {
    fn encode(&self) -> String {
        format!(
            "id={};skill={};bucket={};d={};valid={};format={}",
            self.id,
            self.skill_index, self.bucket, self.difficulty, self.valid, self.format_ok
        )
    }

    fn decode(s: &str) -> std::result::Result<Self, String> {
        let mut q = SyntheticQuestion {
            id: 0,
            skill_index: 0,
            bucket: 0,
            difficulty: 0.0,
            valid: true,
            format_ok: true,
        };
        for part in s.split(';') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("malformed field `{part}`"))?;
            let e = |err: &dyn std::fmt::Display| format!("{key}: {err}");
            match key {
                "id" => q.id = value.parse().map_err(|x| e(&x))?,
                "skill" => q.skill_index = value.parse().map_err(|x| e(&x))?,
                "bucket" => q.bucket = value.parse().map_err(|x| e(&x))?,
                "d" => q.difficulty = value.parse().map_err(|x| e(&x))?,
                "valid" => q.valid = value.parse().map_err(|x| e(&x))?,
                "format" => q.format_ok = value.parse().map_err(|x| e(&x))?,
                other => return Err(format!("unknown field `{other}`")),
            }
        }
        Ok(q)
    }
}

/// A proposal together with the policy token that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub question: SyntheticQuestion,
    pub token: PolicyToken,
    pub text: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAnswer {
    pub question_id: u64,
    /// Latent ground truth: the attempt succeeded on a valid question.
    pub correct: bool,
    pub format_ok: bool,
    pub token: PolicyToken,
    pub text: Vec<String>,
}

/// A channel verdict plus the latent quantities used for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVerdict {
    pub raw: RawVerdict,
    /// Latent truth the channel was keyed on (validity or correctness).
    pub truth: bool,
    /// Per-verdict noise level `eta`.
    pub noise_level: f64,
    /// The emitted score fell in the band opposite to `truth`.
    pub band_error: bool,
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last non-zero entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn tagged_output<R: Rng + ?Sized>(
    tags: (&str, &str),
    body: &str,
    format_rate: f64,
    rng: &mut R,
) -> Vec<String> {
    let mut text = vec![tags.0.to_string(), body.to_string()];
    if rng.gen::<f64>() < format_rate {
        text.push(tags.1.to_string());
    }
    text
}

/// Samples a question from the Proposer's softmax over `(skill, bucket)`.
pub fn propose<R: Rng + ?Sized>(
    policy: &PolicyParams,
    config: &WorldConfig,
    id: u64,
    rng: &mut R,
) -> Result<Proposal> {
    if policy.cols() != config.proposal_actions() {
        return Err(Error::InvalidInput(format!(
            "proposer policy has {} actions, world needs {}",
            policy.cols(),
            config.proposal_actions()
        )));
    }
    let context = Context::row(0);
    let action = sample_index(&policy.probs(&context), rng);
    let skill_index = action / config.difficulty_buckets;
    let bucket = action % config.difficulty_buckets;
    let difficulty = config.bucket_difficulty(bucket);
    let valid = rng.gen::<f64>() < config.validity_probability(difficulty);
    let text = tagged_output(QUESTION_TAGS, "q", config.format_rate, rng);
    let format_ok = format_check(&text, QUESTION_TAGS.0, QUESTION_TAGS.1);
    Ok(Proposal {
        question: SyntheticQuestion {
            id,
            skill_index,
            bucket,
            difficulty,
            valid,
            format_ok,
        },
        token: PolicyToken { context, action },
        text,
    })
}

/// Draws the per-verdict noise level with mean `eps`.
fn draw_noise_level<R: Rng + ?Sized>(eps: f64, coupling: f64, rng: &mut R) -> f64 {
    let low = eps * (1.0 - coupling);
    let high = eps + coupling * (0.5 - eps);
    // P(high) = 2 eps keeps the mean at eps for every coupling
    if rng.gen::<f64>() < 2.0 * eps {
        high
    } else {
        low
    }
}

/// Emission for one verdict at noise level `eta`.
///
/// Reasoning tokens put `1 - 2 eta (V-1)/V` on one token and spread the rest,
/// reaching uniform at `eta = 0.5`. The score token puts `1 - eta` uniformly
/// on the band matching `truth` and `eta` uniformly on the opposite band.
pub fn channel_emission(
    config: &WorldConfig,
    truth: bool,
    eta: f64,
) -> Result<Vec<TokenDistribution>> {
    let v = config.reasoning_vocab as f64;
    let spread = 2.0 * eta * (v - 1.0) / v;
    let mut reasoning = vec![spread / (v - 1.0); config.reasoning_vocab];
    reasoning[0] = 1.0 - spread;
    let reasoning = TokenDistribution::new(reasoning)?;

    let scale = config.score_scale;
    let (right, wrong) = if truth {
        (scale.high_band(), scale.low_band())
    } else {
        (scale.low_band(), scale.high_band())
    };
    let mut score = vec![0.0; scale.len()];
    let (nr, nw) = ((right.end - right.start) as f64, (wrong.end - wrong.start) as f64);
    for s in right {
        score[scale.token_of(s)] = (1.0 - eta) / nr;
    }
    for s in wrong {
        score[scale.token_of(s)] = eta / nw;
    }
    let score = TokenDistribution::new(score)?;

    let mut emission = vec![reasoning; config.reasoning_tokens];
    emission.push(score);
    Ok(emission)
}

fn noisy_band_verdict<R: Rng + ?Sized>(
    role: Role,
    truth: bool,
    eps: f64,
    config: &WorldConfig,
    rng: &mut R,
) -> Result<ChannelVerdict> {
    let eta = draw_noise_level(eps, config.confidence_coupling, rng);
    let emission = channel_emission(config, truth, eta)?;
    let emitted: Vec<usize> = emission.iter().map(|d| sample_index(d.probs(), rng)).collect();
    let scale = config.score_scale;
    let score = scale.score_of(*emitted.last().expect("emission has a score token"));
    let reported_high = scale.high_band().contains(&score);
    let n = emission.len();
    Ok(ChannelVerdict {
        raw: RawVerdict {
            role,
            score,
            scale,
            emission,
            emitted: Some(emitted),
            score_span: n - 1..n,
            format_ok: true,
        },
        truth,
        noise_level: eta,
        band_error: reported_high != truth,
    })
}

pub fn validate<R: Rng + ?Sized>(
    question: &SyntheticQuestion,
    config: &WorldConfig,
    rng: &mut R,
) -> Result<ChannelVerdict> {
    let eps = config.validator_error_rate(question.difficulty);
    noisy_band_verdict(Role::Validator, question.valid, eps, config, rng)
}

pub fn success_probability(policy: &PolicyParams, question: &SyntheticQuestion) -> f64 {
    policy.probs(&question.solver_context())[0]
}

/// `theta_skill`: the Solver's log-odds of success at `d = 0.5`.
pub fn competence(policy: &PolicyParams, skill: usize) -> f64 {
    policy.get(skill, 0) - policy.get(skill, 1)
}

pub fn solve<R: Rng + ?Sized>(
    policy: &PolicyParams,
    question: &SyntheticQuestion,
    config: &WorldConfig,
    rng: &mut R,
) -> Result<SyntheticAnswer> {
    if policy.cols() != 2 || question.skill_index >= policy.rows() {
        return Err(Error::InvalidInput(format!(
            "solver policy [{} x {}] cannot answer skill {}",
            policy.rows(),
            policy.cols(),
            question.skill_index
        )));
    }
    let context = question.solver_context();
    let action = sample_index(&policy.probs(&context), rng);
    let succeeded = action == 0;
    let text = tagged_output(ANSWER_TAGS, "a", config.format_rate, rng);
    let format_ok = format_check(&text, ANSWER_TAGS.0, ANSWER_TAGS.1);
    Ok(SyntheticAnswer {
        question_id: question.id,
        correct: succeeded && question.valid,
        format_ok,
        token: PolicyToken { context, action },
        text,
    })
}

pub fn judge<R: Rng + ?Sized>(
    answer: &SyntheticAnswer,
    question: &SyntheticQuestion,
    config: &WorldConfig,
    rng: &mut R,
) -> Result<ChannelVerdict> {
    let eps = config.judge_error_rate(question.difficulty);
    noisy_band_verdict(Role::Judge, answer.correct, eps, config, rng)
}

/// Frozen evaluation questions drawn once from the run seed.
pub fn probe_set<R: Rng + ?Sized>(config: &WorldConfig, rng: &mut R) -> Vec<SyntheticQuestion> {
    (0..config.probe_size as u64)
        .map(|id| {
            let skill_index = rng.gen_range(0..config.skill_dim);
            let bucket = rng.gen_range(0..config.difficulty_buckets);
            SyntheticQuestion {
                id,
                skill_index,
                bucket,
                difficulty: config.bucket_difficulty(bucket),
                valid: true,
                format_ok: true,
            }
        })
        .collect()
}

/// Exact mean success probability over the probe set.
pub fn ground_truth_accuracy(policy: &PolicyParams, probe: &[SyntheticQuestion]) -> f64 {
    if probe.is_empty() {
        return 0.0;
    }
    probe
        .iter()
        .map(|q| success_probability(policy, q))
        .sum::<f64>()
        / probe.len() as f64
}

pub fn write_probe_set<W: std::io::Write>(probe: &[SyntheticQuestion], mut out: W) -> Result<()> {
    let io = |e| Error::io("<probe>", e);
    writeln!(out, "# id\tskill_index\tdifficulty").map_err(io)?;
    for q in probe {
        writeln!(out, "{}\t{}\t{}", q.id, q.skill_index, q.difficulty).map_err(io)?;
    }
    Ok(())
}

pub fn solver_policy(config: &WorldConfig) -> PolicyParams {
    PolicyParams::zeros(config.skill_dim, 2)
}

pub fn proposer_policy(config: &WorldConfig) -> PolicyParams {
    PolicyParams::zeros(1, config.proposal_actions())
}
