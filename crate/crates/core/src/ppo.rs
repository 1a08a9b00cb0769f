//! Confidence-weighted clipped-surrogate PPO for a tabular softmax policy.
//!
//! The policy is a `[contexts x actions]` logit table. A token picks a row,
//! optionally adds a fixed offset vector (question features the policy does
//! not own), and samples an action from the softmax. A trajectory's
//! log-probability is the sum over its tokens.
//!
//! The objective for one batch of `N` samples is
//!
//! ```text
//! L = -(1/N) sum_i w_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i) + beta KL(pi || pi_ref)
//! ```
//!
//! with `rho_i = exp(logp_i - logp_behavior_i)`, group-mean advantages, and
//! an exact KL averaged over every token context in the batch.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::credit::UpdateWeight;
use crate::error::{Error, Result};
use crate::Role;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    rows: usize,
    cols: usize,
    logits: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            logits: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, logits: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols < 2 {
            return Err(Error::InvalidInput(format!(
                "policy shape [{rows} x {cols}] needs at least one row and two actions"
            )));
        }
        if logits.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "{} logits for shape [{rows} x {cols}]",
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite logit at {i}")));
        }
        Ok(Self { rows, cols, logits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, context: usize) -> &[f64] {
        &self.logits[context * self.cols..(context + 1) * self.cols]
    }

    pub fn get(&self, context: usize, action: usize) -> f64 {
        self.logits[context * self.cols + action]
    }

    pub fn set(&mut self, context: usize, action: usize, value: f64) {
        self.logits[context * self.cols + action] = value;
    }

    fn check_context(&self, ctx: &Context) -> Result<()> {
        if ctx.row >= self.rows {
            return Err(Error::InvalidInput(format!(
                "context row {} outside policy with {} rows",
                ctx.row, self.rows
            )));
        }
        if !ctx.offset.is_empty() && ctx.offset.len() != self.cols {
            return Err(Error::InvalidInput(format!(
                "offset of length {} for {} actions",
                ctx.offset.len(),
                self.cols
            )));
        }
        Ok(())
    }

    /// Log-softmax of `row + offset`.
    pub fn log_probs(&self, ctx: &Context) -> Vec<f64> {
        let row = self.row(ctx.row);
        let z: Vec<f64> = if ctx.offset.is_empty() {
            row.to_vec()
        } else {
            row.iter().zip(&ctx.offset).map(|(a, b)| a + b).collect()
        };
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        z.iter().map(|x| x - log_norm).collect()
    }

    pub fn probs(&self, ctx: &Context) -> Vec<f64> {
        self.log_probs(ctx).into_iter().map(f64::exp).collect()
    }

    pub fn sequence_log_prob(&self, tokens: &[PolicyToken]) -> Result<f64> {
        let mut total = 0.0;
        for t in tokens {
            self.check_context(&t.context)?;
            if t.action >= self.cols {
                return Err(Error::InvalidInput(format!(
                    "action {} outside {} actions",
                    t.action, self.cols
                )));
            }
            total += self.log_probs(&t.context)[t.action];
        }
        Ok(total)
    }
}

/// A row of the logit table plus an optional fixed additive offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub row: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offset: Vec<f64>,
}

impl Context {
    pub fn row(row: usize) -> Self {
        Self {
            row,
            offset: Vec::new(),
        }
    }

    pub fn with_offset(row: usize, offset: Vec<f64>) -> Self {
        Self { row, offset }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyToken {
    pub context: Context,
    pub action: usize,
}

/// One trajectory ready for an update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Role that generated the trajectory; only optimized roles are accepted.
    pub role: Role,
    pub tokens: Vec<PolicyToken>,
    /// Log-probability under the rollout-time snapshot.
    pub logp_behavior: f64,
    /// Log-probability under the frozen reference policy.
    pub logp_ref: f64,
    pub reward: f64,
    pub weight: UpdateWeight,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub samples: Vec<Sample>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.samples.iter().map(|s| s.tokens.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidInput("empty rollout batch".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if !s.role.is_optimized() {
                return Err(Error::RoleIsolation(format!("{} (sample {i})", s.role)));
            }
            if s.tokens.is_empty() {
                return Err(Error::InvalidInput(format!("sample {i} has no tokens")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub clip_ratio: f64,
    pub learning_rate: f64,
    pub kl_coeff: f64,
    pub weight_floor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl OptimizerConfig {
    /// Values used for billion-parameter models.
    pub fn published() -> Self {
        Self {
            clip_ratio: 0.2,
            learning_rate: 1e-6,
            kl_coeff: 0.01,
            weight_floor: 0.1,
        }
    }

    /// Toy-scale values for the synthetic world.
    pub fn desk() -> Self {
        Self {
            learning_rate: 80.0,
            ..Self::published()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(Error::config("optimizer.clip_ratio", "must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be positive"));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return Err(Error::config("optimizer.kl_coeff", "must be non-negative"));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor <= 1.0) {
            return Err(Error::config("optimizer.weight_floor", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// `base * (1 + cos(pi * step / total)) / 2`, zero from `total` on.
pub fn cosine_lr(base: f64, step_index: usize, total_steps: usize) -> f64 {
    if total_steps == 0 || step_index >= total_steps {
        return 0.0;
    }
    base * 0.5 * (1.0 + (PI * step_index as f64 / total_steps as f64).cos())
}

/// Group-baseline advantages `r_i - mean(r)`.
pub fn advantages(batch: &RolloutBatch) -> Vec<f64> {
    if batch.is_empty() {
        return Vec::new();
    }
    // centre on the first reward so identical rewards give exactly zero
    let r0 = batch.samples[0].reward;
    let shift = batch.samples.iter().map(|s| s.reward - r0).sum::<f64>() / batch.len() as f64;
    batch.samples.iter().map(|s| (s.reward - r0) - shift).collect()
}

/// `min(rho A, clip(rho) A)` and whether the unclipped branch is active.
pub fn clipped_objective(ratio: f64, advantage: f64, clip_ratio: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_ratio, 1.0 + clip_ratio) * advantage;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

fn kl_of(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum::<f64>()
        .max(0.0)
}

/// Mean over contexts of `KL(pi(.|ctx) || pi_ref(.|ctx))`.
pub fn kl_divergence(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    contexts: &[Context],
) -> Result<f64> {
    if params.rows != ref_params.rows || params.cols != ref_params.cols {
        return Err(Error::InvalidInput("policy and reference shapes differ".into()));
    }
    if contexts.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ctx in contexts {
        params.check_context(ctx)?;
        total += kl_of(&params.log_probs(ctx), &ref_params.log_probs(ctx));
    }
    Ok(total / contexts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    /// `-(1/N) sum w_i min(...)` alone.
    pub policy_loss: f64,
    pub kl: f64,
    /// `-w_i min(rho_i A_i, clip(rho_i) A_i)` per sample.
    pub contributions: Vec<f64>,
    pub ratios: Vec<f64>,
}

pub fn surrogate_loss(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    batch: &RolloutBatch,
    advantages: &[f64],
    config: &OptimizerConfig,
) -> Result<LossReport> {
    evaluate(params, ref_params, batch, advantages, config, false).map(|(r, _)| r)
}

/// Loss together with its analytic gradient over every logit.
pub fn loss_and_gradient(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    batch: &RolloutBatch,
    advantages: &[f64],
    config: &OptimizerConfig,
) -> Result<(LossReport, Vec<f64>)> {
    evaluate(params, ref_params, batch, advantages, config, true)
}

fn evaluate(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    batch: &RolloutBatch,
    advantages: &[f64],
    config: &OptimizerConfig,
    with_grad: bool,
) -> Result<(LossReport, Vec<f64>)> {
    batch.validate()?;
    if advantages.len() != batch.len() {
        return Err(Error::InvalidInput(format!(
            "{} advantages for {} samples",
            advantages.len(),
            batch.len()
        )));
    }
    if params.rows != ref_params.rows || params.cols != ref_params.cols {
        return Err(Error::InvalidInput("policy and reference shapes differ".into()));
    }
    let n = batch.len() as f64;
    let token_count = batch.token_count() as f64;
    let cols = params.cols;
    let mut grad = if with_grad {
        vec![0.0; params.len()]
    } else {
        Vec::new()
    };
    let mut contributions = Vec::with_capacity(batch.len());
    let mut ratios = Vec::with_capacity(batch.len());
    let mut kl_total = 0.0;

    for (i, (sample, &adv)) in batch.samples.iter().zip(advantages).enumerate() {
        let logp = params.sequence_log_prob(&sample.tokens)?;
        let ratio = (logp - sample.logp_behavior).exp();
        if !ratio.is_finite() || !adv.is_finite() {
            return Err(Error::NumericalFault {
                sample: i,
                reason: format!("ratio {ratio}, advantage {adv}"),
            });
        }
        let w = sample.weight.value;
        let (objective, unclipped_active) = clipped_objective(ratio, adv, config.clip_ratio);
        contributions.push(-w * objective);
        ratios.push(ratio);

        // d(contribution / N) / d(logp)
        let dlogp = if unclipped_active {
            -w * ratio * adv / n
        } else {
            0.0
        };
        for token in &sample.tokens {
            let logp_t = params.log_probs(&token.context);
            let logq_t = ref_params.log_probs(&token.context);
            let kl_t = kl_of(&logp_t, &logq_t);
            kl_total += kl_t;
            if !with_grad {
                continue;
            }
            let base = token.context.row * cols;
            for (j, (&lp, &lq)) in logp_t.iter().zip(&logq_t).enumerate() {
                let p = lp.exp();
                let indicator = if j == token.action { 1.0 } else { 0.0 };
                let mut g = dlogp * (indicator - p);
                if config.kl_coeff > 0.0 {
                    g += config.kl_coeff * p * ((lp - lq) - kl_t) / token_count;
                }
                grad[base + j] += g;
            }
        }
    }

    let policy_loss = contributions.iter().sum::<f64>() / n;
    let kl = kl_total / token_count;
    Ok((
        LossReport {
            loss: policy_loss + config.kl_coeff * kl,
            policy_loss,
            kl,
            contributions,
            ratios,
        },
        grad,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: LossReport,
    pub learning_rate: f64,
    pub grad_norm: f64,
    pub optimized_tokens: usize,
}

/// One gradient-descent step on `params` with a cosine-decayed rate.
///
/// On a non-finite gradient the parameters are left untouched.
pub fn step(
    params: &mut PolicyParams,
    ref_params: &PolicyParams,
    batch: &RolloutBatch,
    config: &OptimizerConfig,
    step_index: usize,
    total_steps: usize,
) -> Result<StepReport> {
    let adv = advantages(batch);
    let (loss, grad) = loss_and_gradient(params, ref_params, batch, &adv, config)?;
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    let lr = cosine_lr(config.learning_rate, step_index, total_steps);
    for (x, g) in params.logits.iter_mut().zip(&grad) {
        *x -= lr * g;
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok(StepReport {
        loss,
        learning_rate: lr,
        grad_norm,
        optimized_tokens: batch.token_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weight(value: f64) -> UpdateWeight {
        UpdateWeight {
            value,
            role: Role::Solver,
        }
    }

    /// Single-token sample on a `[1 x 2]` zero policy with the requested ratio.
    fn sample_with_ratio(ratio: f64, reward: f64, w: f64) -> Sample {
        Sample {
            role: Role::Solver,
            tokens: vec![PolicyToken {
                context: Context::row(0),
                action: 0,
            }],
            logp_behavior: 0.5f64.ln() - ratio.ln(),
            logp_ref: 0.5f64.ln(),
            reward,
            weight: weight(w),
        }
    }

    fn no_kl() -> OptimizerConfig {
        OptimizerConfig {
            kl_coeff: 0.0,
            ..OptimizerConfig::published()
        }
    }

    #[test]
    fn advantage_examples() {
        let batch = |rs: &[f64]| RolloutBatch {
            samples: rs.iter().map(|&r| sample_with_ratio(1.0, r, 1.0)).collect(),
        };
        assert!(advantages(&batch(&[0.4, 0.4, 0.4])).iter().all(|&a| a == 0.0));
        assert_eq!(advantages(&batch(&[1.0, 0.0])), vec![0.5, -0.5]);
        let a = advantages(&batch(&[0.9, 0.6, 0.3]));
        for (x, y) in a.iter().zip([0.3, 0.0, -0.3]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn contribution_examples() {
        let p = PolicyParams::zeros(1, 2);
        let cases = [
            (1.0, 1.0, 1.0, -1.0),
            (1.5, 1.0, 1.0, -1.2),
            (0.5, -1.0, 0.1, 0.08),
        ];
        for (ratio, adv, w, expected) in cases {
            let batch = RolloutBatch {
                samples: vec![sample_with_ratio(ratio, 0.0, w)],
            };
            let report = surrogate_loss(&p, &p, &batch, &[adv], &no_kl()).unwrap();
            assert!(
                (report.contributions[0] - expected).abs() < 1e-9,
                "rho={ratio}: {} vs {expected}",
                report.contributions[0]
            );
        }
    }

    #[test]
    fn clip_inactive_inside_trust_region() {
        for ratio in [0.8, 0.95, 1.0, 1.1, 1.2] {
            for adv in [-1.0, 0.3] {
                let (obj, active) = clipped_objective(ratio, adv, 0.2);
                assert!(active);
                assert_eq!(obj, ratio * adv);
            }
        }
    }

    #[test]
    fn non_finite_ratio_names_sample() {
        let p = PolicyParams::zeros(1, 2);
        let mut s = sample_with_ratio(1.0, 0.0, 1.0);
        s.logp_behavior = -1e6;
        let batch = RolloutBatch {
            samples: vec![sample_with_ratio(1.0, 0.0, 1.0), s],
        };
        let err = surrogate_loss(&p, &p, &batch, &[0.0, 0.0], &no_kl()).unwrap_err();
        assert!(matches!(err, Error::NumericalFault { sample: 1, .. }));
    }

    #[test]
    fn validator_samples_are_rejected() {
        let mut p = PolicyParams::zeros(1, 2);
        let r = p.clone();
        let mut s = sample_with_ratio(1.0, 1.0, 1.0);
        s.role = Role::Judge;
        let batch = RolloutBatch { samples: vec![s] };
        let err = step(&mut p, &r, &batch, &no_kl(), 0, 10).unwrap_err();
        assert!(matches!(err, Error::RoleIsolation(_)));
        assert_eq!(p, r);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.5, 0, 100), 0.5);
        assert!((cosine_lr(0.5, 50, 100) - 0.25).abs() < 1e-15);
        assert_eq!(cosine_lr(0.5, 100, 100), 0.0);
        assert_eq!(cosine_lr(0.5, 3, 0), 0.0);
    }

    #[test]
    fn zero_gradient_and_final_step_leave_params_unchanged() {
        let mut p = PolicyParams::from_vec(1, 2, vec![0.3, -0.2]).unwrap();
        let r = p.clone();
        // equal rewards: all advantages zero, reference equals params
        let mut s = sample_with_ratio(1.0, 0.5, 1.0);
        s.logp_behavior = p.sequence_log_prob(&s.tokens).unwrap();
        let batch = RolloutBatch {
            samples: vec![s.clone(), s.clone()],
        };
        let rep = step(&mut p, &r, &batch, &OptimizerConfig::published(), 0, 10).unwrap();
        assert_eq!(rep.grad_norm, 0.0);
        assert_eq!(p, r);

        let mut s2 = s.clone();
        s2.reward = 0.0;
        let batch = RolloutBatch {
            samples: vec![s, s2],
        };
        step(&mut p, &r, &batch, &OptimizerConfig::desk(), 10, 10).unwrap();
        assert_eq!(p, r);
    }

    #[test]
    fn kl_examples() {
        let p = PolicyParams::from_vec(2, 3, vec![0.1, 2.0, -1.0, 0.0, 0.5, 0.5]).unwrap();
        let ctx = [Context::row(0), Context::row(1)];
        assert_eq!(kl_divergence(&p, &p, &ctx).unwrap(), 0.0);

        // near one-hot vs uniform over two actions
        let a = PolicyParams::from_vec(1, 2, vec![12.0, 0.0]).unwrap();
        let b = PolicyParams::zeros(1, 2);
        let pa = 1.0 / (1.0 + (-12.0f64).exp());
        let closed = pa * (pa / 0.5).ln() + (1.0 - pa) * ((1.0 - pa) / 0.5).ln();
        let kl = kl_divergence(&a, &b, &[Context::row(0)]).unwrap();
        assert!((kl - closed).abs() < 1e-6);
        assert!((kl - 2f64.ln()).abs() < 1e-3);

        // asymmetry
        let c = PolicyParams::from_vec(1, 2, vec![1.5, 0.0]).unwrap();
        let fwd = kl_divergence(&c, &b, &[Context::row(0)]).unwrap();
        let rev = kl_divergence(&b, &c, &[Context::row(0)]).unwrap();
        assert!(fwd > 0.0 && rev > 0.0);
        assert!((fwd - rev).abs() > 1e-3);
    }

    #[test]
    fn offsets_shift_the_softmax() {
        let p = PolicyParams::from_vec(1, 2, vec![0.7, 0.0]).unwrap();
        let ctx = Context::with_offset(0, vec![0.0, 0.7]);
        let probs = p.probs(&ctx);
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!(p.sequence_log_prob(&[PolicyToken { context: Context::with_offset(0, vec![1.0]), action: 0 }]).is_err());
    }
}
