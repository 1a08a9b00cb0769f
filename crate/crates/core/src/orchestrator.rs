//! The two-stage self-evolution iteration.
//!
//! Stage one: the Proposer writes questions, the Validator scores them, and
//! accepted questions enter the replay buffer after a few judged Solver
//! rollouts seed their solve rate. The Proposer is then updated on the whole
//! proposal batch. Stage two: the Solver answers questions replayed by
//! priority, the Judge scores each answer, and the Solver is updated.
//!
//! Validator and Judge outputs only ever become scores, confidences and
//! weights; they are never turned into optimizer trajectories.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::confidence::SignalKind;
use crate::credit::{self, UpdateWeight};
use crate::error::{Error, Result};
use crate::feedback::{assess_with_scope, ConfidenceScope};
use crate::ppo::{self, OptimizerConfig, PolicyParams, RolloutBatch, Sample};
use crate::replay::{BufferConfig, PriorityRule, QuestionRecord, ReplayBuffer};
use crate::rng::{stream, Purpose};
use crate::world::{self, SyntheticQuestion, WorldConfig};
use crate::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    /// Every PPO weight forced to 1.0.
    NoWeighting,
    /// Replay sampling ignores priority.
    NoPriority,
    /// Replay priority uses `1 - p` in place of `4p(1-p)`.
    OneMinusP,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::NoWeighting,
        AblationMode::NoPriority,
        AblationMode::OneMinusP,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoWeighting => "no_weighting",
            AblationMode::NoPriority => "no_priority",
            AblationMode::OneMinusP => "one_minus_p",
        }
    }

    pub fn replay_rule(self) -> PriorityRule {
        match self {
            AblationMode::NoPriority => PriorityRule::Uniform,
            AblationMode::OneMinusP => PriorityRule::OneMinusP,
            _ => PriorityRule::Learnability,
        }
    }

    pub fn uses_weights(self) -> bool {
        self != AblationMode::NoWeighting
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub total_steps: usize,
    /// Run the propose/validate stage every `K` steps.
    pub proposer_phase_period: usize,
    pub proposals_per_phase: usize,
    pub solver_batch_size: usize,
    /// Judged Solver rollouts that seed `p(q)` for each accepted question.
    pub init_rollouts: usize,
    /// Accept a question only if `v >= tau_v`.
    pub validator_accept_threshold: f64,
    pub ablation: AblationMode,
    pub confidence_scope: ConfidenceScope,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl LoopConfig {
    pub fn desk() -> Self {
        Self {
            total_steps: 200,
            proposer_phase_period: 1,
            proposals_per_phase: 16,
            solver_batch_size: 64,
            init_rollouts: 4,
            validator_accept_threshold: 0.5,
            ablation: AblationMode::Full,
            confidence_scope: ConfidenceScope::FullEmission,
        }
    }

    pub fn published() -> Self {
        Self {
            solver_batch_size: 128,
            proposals_per_phase: 128,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.proposer_phase_period == 0 {
            return Err(Error::config("loop.proposer_phase_period", "must be at least 1"));
        }
        for (name, v) in [
            ("loop.proposals_per_phase", self.proposals_per_phase),
            ("loop.solver_batch_size", self.solver_batch_size),
            ("loop.init_rollouts", self.init_rollouts),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.validator_accept_threshold) {
            return Err(Error::config(
                "loop.validator_accept_threshold",
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Everything a run needs besides the output location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSetup {
    pub world: WorldConfig,
    pub looping: LoopConfig,
    pub optimizer: OptimizerConfig,
    pub buffer: BufferConfig,
    pub signal: SignalKind,
    pub seed: u64,
}

impl LoopSetup {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.looping.validate()?;
        self.optimizer.validate()?;
        self.buffer.validate()
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationReport {
    pub step: usize,
    pub proposed: usize,
    pub accepted: usize,
    /// Accepted questions that are latently invalid.
    pub accepted_invalid: usize,
    pub solved: usize,
    pub mean_v: Option<f64>,
    pub mean_c_v: Option<f64>,
    pub mean_c_j: Option<f64>,
    pub mean_w_p: Option<f64>,
    pub mean_w_s: Option<f64>,
    pub mean_reward_proposer: Option<f64>,
    pub mean_reward_solver: Option<f64>,
    /// Mean solve rate of replayed questions at the moment they were drawn.
    pub mean_sampled_p: Option<f64>,
    /// Fraction of Judge verdicts in the wrong band.
    pub judge_error_rate: Option<f64>,
    pub buffer_size: usize,
    pub probe_accuracy: f64,
    pub proposer_tokens_optimized: usize,
    pub solver_tokens_optimized: usize,
    pub feedback_tokens_optimized: usize,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub wall_time_ms: f64,
}

/// Per-sample record of one PPO input, for inspecting weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub step: usize,
    pub role: Role,
    pub question_id: u64,
    pub v: f64,
    pub c_v: f64,
    pub c_j: Option<f64>,
    pub weight: f64,
    pub reward: f64,
    /// Latent validity of the question.
    pub valid: bool,
    /// Latent answer correctness (Solver samples only).
    pub correct: Option<bool>,
    /// Whether the feedback behind the reward was in the wrong band.
    pub feedback_error: bool,
}

/// Solver rollouts for one step, before they touch the buffer or the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverRollouts {
    pub batch: RolloutBatch,
    pub judgments: Vec<(u64, f64)>,
    pub traces: Vec<SampleTrace>,
    pub sampled_p: Vec<f64>,
    pub c_j: Vec<f64>,
    pub judge_errors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalRollouts {
    pub batch: RolloutBatch,
    pub accepted: Vec<QuestionRecord<SyntheticQuestion>>,
    pub accepted_invalid: usize,
    pub traces: Vec<SampleTrace>,
    pub v: Vec<f64>,
    pub c_v: Vec<f64>,
    pub warnings: Vec<String>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn weight_mean(batch: &RolloutBatch) -> Option<f64> {
    mean(&batch.samples.iter().map(|s| s.weight.value).collect::<Vec<_>>())
}

fn reward_mean(batch: &RolloutBatch) -> Option<f64> {
    mean(&batch.samples.iter().map(|s| s.reward).collect::<Vec<_>>())
}

#[derive(Clone)]
pub struct Orchestrator {
    setup: LoopSetup,
    buffer: ReplayBuffer<SyntheticQuestion>,
    proposer: PolicyParams,
    solver: PolicyParams,
    proposer_ref: PolicyParams,
    solver_ref: PolicyParams,
    probe: Vec<SyntheticQuestion>,
    next_question_id: u64,
    steps_done: usize,
    trace_samples: bool,
}

impl Orchestrator {
    pub fn new(setup: LoopSetup) -> Result<Self> {
        setup.validate()?;
        let proposer = world::proposer_policy(&setup.world);
        let solver = world::solver_policy(&setup.world);
        let probe = world::probe_set(&setup.world, &mut stream(setup.seed, Purpose::Probe, 0));
        Ok(Self {
            buffer: ReplayBuffer::new(setup.buffer)?,
            proposer_ref: proposer.clone(),
            solver_ref: solver.clone(),
            proposer,
            solver,
            probe,
            next_question_id: 0,
            steps_done: 0,
            trace_samples: false,
            setup,
        })
    }

    pub fn with_tracing(mut self, enabled: bool) -> Self {
        self.trace_samples = enabled;
        self
    }

    pub fn setup(&self) -> &LoopSetup {
        &self.setup
    }

    pub fn buffer(&self) -> &ReplayBuffer<SyntheticQuestion> {
        &self.buffer
    }

    pub fn buffer_mut(&mut self) -> &mut ReplayBuffer<SyntheticQuestion> {
        &mut self.buffer
    }

    pub fn solver(&self) -> &PolicyParams {
        &self.solver
    }

    pub fn solver_mut(&mut self) -> &mut PolicyParams {
        &mut self.solver
    }

    pub fn proposer(&self) -> &PolicyParams {
        &self.proposer
    }

    pub fn probe(&self) -> &[SyntheticQuestion] {
        &self.probe
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn probe_accuracy(&self) -> f64 {
        world::ground_truth_accuracy(&self.solver, &self.probe)
    }

    fn weights_enabled(&self) -> bool {
        self.setup.looping.ablation.uses_weights()
    }

    /// Proposals for `step`, validated and with seeded solve rates; the
    /// buffer and policies are left untouched.
    pub fn collect_proposals(&self, step: usize) -> Result<ProposalRollouts> {
        let lc = &self.setup.looping;
        let mut out = ProposalRollouts {
            batch: RolloutBatch::default(),
            accepted: Vec::new(),
            accepted_invalid: 0,
            traces: Vec::new(),
            v: Vec::new(),
            c_v: Vec::new(),
            warnings: Vec::new(),
        };
        for k in 0..lc.proposals_per_phase {
            let id = self.next_question_id + k as u64;
            match self.one_proposal(id, step) {
                Ok((sample, record, trace)) => {
                    out.v.push(trace.v);
                    out.c_v.push(trace.c_v);
                    if let Some(record) = record {
                        if !record.payload.valid {
                            out.accepted_invalid += 1;
                        }
                        out.accepted.push(record);
                    }
                    if self.trace_samples {
                        out.traces.push(trace);
                    }
                    out.batch.samples.push(sample);
                }
                Err(e) => out.warnings.push(format!("proposal {id}: {e}")),
            }
        }
        Ok(out)
    }

    fn one_proposal(
        &self,
        id: u64,
        step: usize,
    ) -> Result<(Sample, Option<QuestionRecord<SyntheticQuestion>>, SampleTrace)> {
        let cfg = &self.setup.world;
        let lc = &self.setup.looping;
        let seed = self.setup.seed;
        let proposal = world::propose(&self.proposer, cfg, id, &mut stream(seed, Purpose::Propose, id))?;
        let q = proposal.question;
        let verdict = world::validate(&q, cfg, &mut stream(seed, Purpose::Validate, id))?;
        let fb = assess_with_scope(&verdict.raw, self.setup.signal, lc.confidence_scope)?;
        let (v, c_v) = (fb.normalized_score, fb.confidence);
        let accepted = fb.format_ok && q.format_ok && v >= lc.validator_accept_threshold;

        let mut record = None;
        let mut learnable_p = None;
        if accepted {
            let mut r = QuestionRecord::new(q.id, q.clone(), v, c_v, step as u64);
            let mut rng = stream(seed, Purpose::InitRollout, id);
            for _ in 0..lc.init_rollouts {
                let answer = world::solve(&self.solver, &q, cfg, &mut rng)?;
                let judged = world::judge(&answer, &q, cfg, &mut rng)?;
                let jf = assess_with_scope(&judged.raw, self.setup.signal, lc.confidence_scope)?;
                r.judge_score_sum += jf.normalized_score;
                r.answer_count += 1;
            }
            learnable_p = Some(r.solve_rate());
            record = Some(r);
        }
        // rejected questions never reach the buffer, so they earn no learnability credit
        let reward = match learnable_p {
            Some(p) => credit::proposer_reward(q.format_ok, v, p)?.value,
            None => {
                if q.format_ok {
                    v / 2.0
                } else {
                    0.0
                }
            }
        };
        let weight = if self.weights_enabled() {
            credit::proposer_weight(v, c_v)?
        } else {
            UpdateWeight::unit(Role::Proposer)
        };
        let tokens = vec![proposal.token];
        let sample = Sample {
            role: Role::Proposer,
            logp_behavior: self.proposer.sequence_log_prob(&tokens)?,
            logp_ref: self.proposer_ref.sequence_log_prob(&tokens)?,
            tokens,
            reward,
            weight,
        };
        let trace = SampleTrace {
            step: step + 1,
            role: Role::Proposer,
            question_id: q.id,
            v,
            c_v,
            c_j: None,
            weight: weight.value,
            reward,
            valid: q.valid,
            correct: None,
            feedback_error: verdict.band_error,
        };
        Ok((sample, record, trace))
    }

    /// Solver rollouts for `step` drawn from the current buffer.
    pub fn collect_solver_rollouts(&self, step: usize) -> Result<SolverRollouts> {
        let cfg = &self.setup.world;
        let lc = &self.setup.looping;
        let seed = self.setup.seed;
        let ids = self.buffer.sample_ids(
            lc.solver_batch_size,
            lc.ablation.replay_rule(),
            &mut stream(seed, Purpose::ReplaySample, step as u64),
        )?;
        let mut out = SolverRollouts {
            batch: RolloutBatch::default(),
            judgments: Vec::with_capacity(ids.len()),
            traces: Vec::new(),
            sampled_p: Vec::with_capacity(ids.len()),
            c_j: Vec::with_capacity(ids.len()),
            judge_errors: 0,
        };
        for (k, id) in ids.into_iter().enumerate() {
            let record = self.buffer.get(id).ok_or(Error::MissingRecord(id))?;
            let q = &record.payload;
            let index = ((step as u64) << 32) | k as u64;
            let answer = world::solve(&self.solver, q, cfg, &mut stream(seed, Purpose::Solve, index))?;
            let verdict = world::judge(&answer, q, cfg, &mut stream(seed, Purpose::Judge, index))?;
            let jf = assess_with_scope(&verdict.raw, self.setup.signal, lc.confidence_scope)?;
            let p_qa = jf.normalized_score;
            let reward = credit::solver_reward(answer.format_ok, p_qa)?.value;
            let weight = if self.weights_enabled() {
                credit::solver_weight(record.v, record.c_v, jf.confidence)?
            } else {
                UpdateWeight::unit(Role::Solver)
            };
            let tokens = vec![answer.token.clone()];
            out.sampled_p.push(record.solve_rate());
            out.c_j.push(jf.confidence);
            out.judge_errors += verdict.band_error as usize;
            out.judgments.push((id, p_qa));
            if self.trace_samples {
                out.traces.push(SampleTrace {
                    step: step + 1,
                    role: Role::Solver,
                    question_id: id,
                    v: record.v,
                    c_v: record.c_v,
                    c_j: Some(jf.confidence),
                    weight: weight.value,
                    reward,
                    valid: q.valid,
                    correct: Some(answer.correct),
                    feedback_error: verdict.band_error,
                });
            }
            out.batch.samples.push(Sample {
                role: Role::Solver,
                logp_behavior: self.solver.sequence_log_prob(&tokens)?,
                logp_ref: self.solver_ref.sequence_log_prob(&tokens)?,
                tokens,
                reward,
                weight,
            });
        }
        Ok(out)
    }

    fn audit(batch: &RolloutBatch, role: Role) -> Result<usize> {
        if let Some(s) = batch.samples.iter().find(|s| s.role != role) {
            return Err(Error::RoleIsolation(s.role.to_string()));
        }
        Ok(batch.token_count())
    }

    /// Runs iteration `steps_done` and returns its report and sample traces.
    pub fn step(&mut self) -> Result<(IterationReport, Vec<SampleTrace>)> {
        let started = Instant::now();
        let step = self.steps_done;
        let lc = self.setup.looping;
        let total = lc.total_steps;
        let mut report = IterationReport {
            step: step + 1,
            proposed: 0,
            accepted: 0,
            accepted_invalid: 0,
            solved: 0,
            mean_v: None,
            mean_c_v: None,
            mean_c_j: None,
            mean_w_p: None,
            mean_w_s: None,
            mean_reward_proposer: None,
            mean_reward_solver: None,
            mean_sampled_p: None,
            judge_error_rate: None,
            buffer_size: 0,
            probe_accuracy: 0.0,
            proposer_tokens_optimized: 0,
            solver_tokens_optimized: 0,
            feedback_tokens_optimized: 0,
            warnings: Vec::new(),
            wall_time_ms: 0.0,
        };
        let mut traces = Vec::new();

        if step.is_multiple_of(lc.proposer_phase_period) {
            let proposals = self.collect_proposals(step)?;
            self.next_question_id += lc.proposals_per_phase as u64;
            report.proposed = lc.proposals_per_phase;
            report.accepted = proposals.accepted.len();
            report.accepted_invalid = proposals.accepted_invalid;
            report.mean_v = mean(&proposals.v);
            report.mean_c_v = mean(&proposals.c_v);
            report.mean_w_p = weight_mean(&proposals.batch);
            report.mean_reward_proposer = reward_mean(&proposals.batch);
            report.warnings.extend(proposals.warnings);
            for record in proposals.accepted {
                self.buffer.insert(record)?;
            }
            if !proposals.batch.is_empty() {
                report.proposer_tokens_optimized = Self::audit(&proposals.batch, Role::Proposer)?;
                ppo::step(
                    &mut self.proposer,
                    &self.proposer_ref,
                    &proposals.batch,
                    &self.setup.optimizer,
                    step,
                    total,
                )?;
            }
            traces.extend(proposals.traces);
        }

        if self.buffer.is_empty() {
            report
                .warnings
                .push("replay buffer empty; solver phase skipped".into());
        } else {
            let rollouts = self.collect_solver_rollouts(step)?;
            for &(id, p_qa) in &rollouts.judgments {
                self.buffer.record_judgment(id, p_qa)?;
            }
            report.solved = rollouts.batch.len();
            report.mean_c_j = mean(&rollouts.c_j);
            report.mean_w_s = weight_mean(&rollouts.batch);
            report.mean_reward_solver = reward_mean(&rollouts.batch);
            report.mean_sampled_p = mean(&rollouts.sampled_p);
            report.judge_error_rate =
                Some(rollouts.judge_errors as f64 / rollouts.batch.len() as f64);
            report.solver_tokens_optimized = Self::audit(&rollouts.batch, Role::Solver)?;
            ppo::step(
                &mut self.solver,
                &self.solver_ref,
                &rollouts.batch,
                &self.setup.optimizer,
                step,
                total,
            )?;
            traces.extend(rollouts.traces);
        }

        self.steps_done += 1;
        report.buffer_size = self.buffer.len();
        report.probe_accuracy = self.probe_accuracy();
        report.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok((report, traces))
    }
}

/// Result of a complete run.
pub struct RunOutcome {
    pub reports: Vec<IterationReport>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    /// Set when the run stopped early on an unrecoverable error.
    pub fault: Option<String>,
    pub orchestrator: Orchestrator,
}

/// Runs `total_steps` iterations, handing each report to `sink` as it lands.
pub fn run_with<F>(setup: LoopSetup, trace_samples: bool, mut sink: F) -> Result<RunOutcome>
where
    F: FnMut(&IterationReport, &[SampleTrace]) -> Result<()>,
{
    let mut orch = Orchestrator::new(setup)?.with_tracing(trace_samples);
    let initial_accuracy = orch.probe_accuracy();
    let mut reports = Vec::with_capacity(setup.looping.total_steps);
    let mut fault = None;
    for _ in 0..setup.looping.total_steps {
        match orch.step() {
            Ok((report, traces)) => {
                sink(&report, &traces)?;
                reports.push(report);
            }
            Err(e) => {
                log::error!("run aborted at step {}: {e}", orch.steps_done() + 1);
                fault = Some(format!("step {}: {e}", orch.steps_done() + 1));
                break;
            }
        }
    }
    Ok(RunOutcome {
        reports,
        initial_accuracy,
        final_accuracy: orch.probe_accuracy(),
        fault,
        orchestrator: orch,
    })
}

pub fn run(setup: LoopSetup) -> Result<RunOutcome> {
    run_with(setup, false, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;

    fn setup(world: WorldConfig, ablation: AblationMode) -> LoopSetup {
        LoopSetup {
            world,
            looping: LoopConfig {
                total_steps: 10,
                ablation,
                ..LoopConfig::desk()
            },
            optimizer: OptimizerConfig::desk(),
            buffer: BufferConfig::default(),
            signal: SignalKind::NormalizedEntropy,
            seed: 11,
        }
    }

    fn question(id: u64, skill_index: usize) -> SyntheticQuestion {
        SyntheticQuestion {
            id,
            skill_index,
            bucket: 2,
            difficulty: 0.5,
            valid: true,
            format_ok: true,
        }
    }

    /// 16 records with observed solve rates 0.05, 0.11, ..., 0.95.
    fn spread_buffer(orch: &mut Orchestrator) {
        for i in 0..16u64 {
            let mut r = QuestionRecord::new(i, question(i, i as usize % 8), 0.9, 0.8, 0);
            r.answer_count = 100;
            r.judge_score_sum = 5.0 + 6.0 * i as f64;
            orch.buffer_mut().insert(r).unwrap();
        }
    }

    fn metrics_json(reports: &[IterationReport]) -> String {
        reports
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn zero_threshold_accepts_every_well_formed_proposal() {
        let mut s = setup(WorldConfig::high_noise(), AblationMode::Full);
        s.looping.validator_accept_threshold = 0.0;
        s.looping.proposals_per_phase = 64;
        s.world.format_rate = 0.7;
        let orch = Orchestrator::new(s).unwrap();
        let out = orch.collect_proposals(0).unwrap();
        let well_formed = (0..64u64)
            .filter(|&id| {
                world::propose(orch.proposer(), &s.world, id, &mut stream(s.seed, Purpose::Propose, id))
                    .unwrap()
                    .question
                    .format_ok
            })
            .count();
        assert!(well_formed < 64);
        assert_eq!(out.accepted.len(), well_formed);
    }

    #[test]
    fn noiseless_validator_rejects_invalid_questions() {
        let mut world = WorldConfig::noiseless();
        world.invalidity_slope = 1.0;
        world.difficulty_range = [1.0, 1.0];
        let mut s = setup(world, AblationMode::Full);
        s.looping.proposals_per_phase = 64;
        let mut orch = Orchestrator::new(s).unwrap();
        let out = orch.collect_proposals(0).unwrap();
        assert_eq!(out.v.len(), 64);
        assert!(out.accepted.is_empty());
        let (report, _) = orch.step().unwrap();
        assert_eq!(report.accepted, 0);
        assert_eq!(report.solved, 0);
        assert!(report.warnings.iter().any(|w| w.contains("empty")));
    }

    #[test]
    fn four_split_rollouts_give_maximal_learnability() {
        let mut buffer = ReplayBuffer::new(BufferConfig::default()).unwrap();
        buffer
            .insert(QuestionRecord::new(1, question(1, 0), 1.0, 1.0, 0))
            .unwrap();
        for score in [1.0, 1.0, 0.0, 0.0] {
            buffer.record_judgment(1, score).unwrap();
        }
        let r = buffer.get(1).unwrap();
        assert_eq!(r.solve_rate(), 0.5);
        assert_eq!(crate::replay::learnability(r.solve_rate()), 1.0);
        assert_eq!(buffer.priority_of(r), 1.0);
    }

    #[test]
    fn accepted_questions_are_seeded_with_init_rollouts() {
        let orch = Orchestrator::new(setup(WorldConfig::low_noise(), AblationMode::Full)).unwrap();
        let out = orch.collect_proposals(0).unwrap();
        assert!(!out.accepted.is_empty());
        assert!(out.accepted.iter().all(|r| r.answer_count == 4));
        assert!(out
            .accepted
            .iter()
            .all(|r| r.v >= 0.5 && r.payload.format_ok));
    }

    #[test]
    fn no_weighting_logs_unit_weights() {
        let orch = Orchestrator::new(setup(WorldConfig::high_noise(), AblationMode::NoWeighting))
            .unwrap()
            .with_tracing(true);
        let mut orch = orch;
        for _ in 0..5 {
            let (report, traces) = orch.step().unwrap();
            assert_eq!(report.mean_w_s, Some(1.0));
            assert_eq!(report.mean_w_p, Some(1.0));
            assert!(traces.iter().all(|t| t.weight == 1.0));
        }
    }

    #[test]
    fn no_priority_samples_uniformly() {
        let mut s = setup(WorldConfig::high_noise(), AblationMode::NoPriority);
        s.looping.solver_batch_size = 10_000;
        let mut orch = Orchestrator::new(s).unwrap();
        spread_buffer(&mut orch);
        let out = orch.collect_solver_rollouts(0).unwrap();
        let mut counts = [0usize; 16];
        for (id, _) in &out.judgments {
            counts[*id as usize] += 1;
        }
        let expected = 10_000.0 / 16.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9th percentile of chi-square with 15 degrees of freedom
        assert!(chi2 < 37.70, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn one_minus_p_replays_harder_questions() {
        let mut s = setup(WorldConfig::high_noise(), AblationMode::Full);
        s.looping.solver_batch_size = 10_000;
        let mut full = Orchestrator::new(s).unwrap();
        spread_buffer(&mut full);
        let mut omp = full.clone();
        omp.setup.looping.ablation = AblationMode::OneMinusP;
        let mean = |o: &Orchestrator| {
            let p = o.collect_solver_rollouts(0).unwrap().sampled_p;
            p.iter().sum::<f64>() / p.len() as f64
        };
        let (p_full, p_omp) = (mean(&full), mean(&omp));
        assert!((p_full - 0.5).abs() < 0.02, "{p_full}");
        assert!(p_omp < p_full - 0.1, "{p_omp} vs {p_full}");
    }

    #[test]
    fn identical_seeds_give_identical_streams() {
        let s = setup(WorldConfig::high_noise(), AblationMode::Full);
        let a = run(s).unwrap();
        let b = run(s).unwrap();
        assert_eq!(metrics_json(&a.reports), metrics_json(&b.reports));
        assert_eq!(a.orchestrator.solver(), b.orchestrator.solver());
        let c = run(LoopSetup { seed: 12, ..s }).unwrap();
        assert_ne!(metrics_json(&a.reports), metrics_json(&c.reports));
    }

    #[test]
    fn zero_steps_leave_the_baseline() {
        let mut s = setup(WorldConfig::high_noise(), AblationMode::Full);
        s.looping.total_steps = 0;
        let out = run(s).unwrap();
        assert!(out.reports.is_empty());
        assert_eq!(out.final_accuracy, out.initial_accuracy);
        assert_eq!(out.orchestrator.buffer().len(), 0);
    }

    #[test]
    fn feedback_roles_never_reach_the_optimizer() {
        let mut orch = Orchestrator::new(setup(WorldConfig::high_noise(), AblationMode::Full)).unwrap();
        for _ in 0..5 {
            let (report, _) = orch.step().unwrap();
            assert_eq!(report.feedback_tokens_optimized, 0);
            assert_eq!(report.proposer_tokens_optimized, report.proposed);
            assert_eq!(report.solver_tokens_optimized, report.solved);
        }
        let mut batch = orch.collect_solver_rollouts(5).unwrap().batch;
        assert!(Orchestrator::audit(&batch, Role::Solver).is_ok());
        batch.samples[0].role = Role::Judge;
        assert!(matches!(
            Orchestrator::audit(&batch, Role::Solver),
            Err(Error::RoleIsolation(_))
        ));
    }

    #[test]
    fn ablations_change_only_their_own_input() {
        let mut full = Orchestrator::new(setup(WorldConfig::high_noise(), AblationMode::Full)).unwrap();
        for _ in 0..5 {
            full.step().unwrap();
        }
        let mut unweighted = full.clone();
        unweighted.setup.looping.ablation = AblationMode::NoWeighting;
        let mut uniform = full.clone();
        uniform.setup.looping.ablation = AblationMode::NoPriority;

        let a = full.collect_solver_rollouts(5).unwrap();
        let b = unweighted.collect_solver_rollouts(5).unwrap();
        assert_eq!(a.judgments, b.judgments);
        assert_eq!(a.batch.len(), b.batch.len());
        let mut weights_differ = false;
        for (x, y) in a.batch.samples.iter().zip(&b.batch.samples) {
            assert_eq!((&x.tokens, x.reward, x.logp_behavior, x.logp_ref), (&y.tokens, y.reward, y.logp_behavior, y.logp_ref));
            assert_eq!(y.weight.value, 1.0);
            weights_differ |= x.weight != y.weight;
        }
        assert!(weights_differ);
        let pa = full.collect_proposals(5).unwrap();
        let pb = unweighted.collect_proposals(5).unwrap();
        assert_eq!(pa.accepted, pb.accepted);
        for (x, y) in pa.batch.samples.iter().zip(&pb.batch.samples) {
            assert_eq!((&x.tokens, x.reward), (&y.tokens, y.reward));
        }

        // same rollout streams per slot: only the drawn questions may differ
        let c = uniform.collect_solver_rollouts(5).unwrap();
        let ids_a: Vec<u64> = a.judgments.iter().map(|j| j.0).collect();
        let ids_c: Vec<u64> = c.judgments.iter().map(|j| j.0).collect();
        assert_ne!(ids_a, ids_c);
        let mut shared = 0;
        for k in 0..ids_a.len() {
            if ids_a[k] == ids_c[k] {
                assert_eq!(a.batch.samples[k], c.batch.samples[k]);
                shared += 1;
            }
        }
        assert!(shared > 0);
    }

    #[test]
    fn ablation_modes_parse() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
        assert!("weighted".parse::<AblationMode>().is_err());
    }
}
