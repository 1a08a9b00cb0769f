//! Replay buffer of validated questions, sampled proportionally to
//! `v * c_v * max(4 p (1 - p), floor)`.
//!
//! Priorities are recomputed from the stored statistics whenever they are
//! needed; nothing is cached between writes. The buffer holds at most a few
//! thousand records, so sampling is a linear cumulative-sum pass per batch.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Solve rate assumed for a question nobody has answered yet.
pub const COLD_START_SOLVE_RATE: f64 = 0.5;

/// Opaque question descriptor stored alongside the replay statistics.
pub trait Payload: Clone {
    /// Single-line encoding; must not contain tabs or newlines.
    fn encode(&self) -> String;
    fn decode(s: &str) -> std::result::Result<Self, String>;
}

impl Payload for String {
    fn encode(&self) -> String {
        self.clone()
    }

    fn decode(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionRecord<P> {
    pub id: u64,
    pub payload: P,
    pub v: f64,
    pub c_v: f64,
    pub judge_score_sum: f64,
    pub answer_count: u64,
    pub insertion_step: u64,
}

impl<P> QuestionRecord<P> {
    pub fn new(id: u64, payload: P, v: f64, c_v: f64, insertion_step: u64) -> Self {
        Self {
            id,
            payload,
            v,
            c_v,
            judge_score_sum: 0.0,
            answer_count: 0,
            insertion_step,
        }
    }

    /// Mean judge score over every recorded answer, or `None` before the first.
    pub fn observed_solve_rate(&self) -> Option<f64> {
        (self.answer_count > 0).then(|| self.judge_score_sum / self.answer_count as f64)
    }

    pub fn solve_rate(&self) -> f64 {
        self.observed_solve_rate().unwrap_or(COLD_START_SOLVE_RATE)
    }

    fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.v) || !unit.contains(&self.c_v) {
            return Err(Error::InvalidInput(format!(
                "record {}: v = {}, c_v = {} must lie in [0, 1]",
                self.id, self.v, self.c_v
            )));
        }
        if !(self.judge_score_sum >= 0.0 && self.judge_score_sum <= self.answer_count as f64) {
            return Err(Error::InvalidInput(format!(
                "record {}: judge score sum {} inconsistent with {} answers",
                self.id, self.judge_score_sum, self.answer_count
            )));
        }
        Ok(())
    }
}

/// `4 p (1 - p)`: 1 at `p = 0.5`, 0 at both ends.
pub fn learnability(p: f64) -> f64 {
    4.0 * p * (1.0 - p)
}

/// Difficulty term used by replay sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityRule {
    /// `v * c_v * max(4p(1-p), floor)`.
    #[default]
    Learnability,
    /// `v * c_v * max(1 - p, floor)`: always favor harder questions.
    OneMinusP,
    /// Every record weighs the same.
    Uniform,
}

pub fn priority<P>(record: &QuestionRecord<P>, floor: f64) -> f64 {
    priority_with(record, PriorityRule::Learnability, floor)
}

pub fn priority_with<P>(record: &QuestionRecord<P>, rule: PriorityRule, floor: f64) -> f64 {
    let p = record.solve_rate();
    match rule {
        PriorityRule::Learnability => record.v * record.c_v * learnability(p).max(floor),
        PriorityRule::OneMinusP => record.v * record.c_v * (1.0 - p).max(floor),
        PriorityRule::Uniform => 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BufferConfig {
    pub capacity: usize,
    pub priority_floor: f64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            capacity: 8192,
            priority_floor: 0.1,
        }
    }
}

impl BufferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::config("buffer.capacity", "must be at least 1"));
        }
        if !(self.priority_floor > 0.0 && self.priority_floor <= 1.0) {
            return Err(Error::config("buffer.priority_floor", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    Evicted(u64),
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer<P> {
    config: BufferConfig,
    records: Vec<QuestionRecord<P>>,
    index: HashMap<u64, usize>,
}

impl<P: Payload> ReplayBuffer<P> {
    pub fn new(config: BufferConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            records: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[QuestionRecord<P>] {
        &self.records
    }

    pub fn get(&self, id: u64) -> Option<&QuestionRecord<P>> {
        self.index.get(&id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    pub fn priority_of(&self, record: &QuestionRecord<P>) -> f64 {
        priority(record, self.config.priority_floor)
    }

    /// Lowest-priority record, oldest insertion first on ties.
    pub fn min_priority_id(&self) -> Option<u64> {
        self.records
            .iter()
            .map(|r| (self.priority_of(r), r.insertion_step, r.id))
            .min_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            })
            .map(|(_, _, id)| id)
    }

    pub fn insert(&mut self, record: QuestionRecord<P>) -> Result<InsertOutcome> {
        record.validate()?;
        if self.contains(record.id) {
            return Err(Error::DuplicateId(record.id));
        }
        let mut outcome = InsertOutcome::Inserted;
        if self.records.len() >= self.config.capacity {
            // non-empty because capacity >= 1
            let victim = self.min_priority_id().expect("full buffer has a minimum");
            self.remove(victim);
            outcome = InsertOutcome::Evicted(victim);
        }
        self.index.insert(record.id, self.records.len());
        self.records.push(record);
        Ok(outcome)
    }

    fn remove(&mut self, id: u64) -> Option<QuestionRecord<P>> {
        let pos = self.index.remove(&id)?;
        let removed = self.records.remove(pos);
        for (i, r) in self.records.iter().enumerate().skip(pos) {
            self.index.insert(r.id, i);
        }
        Some(removed)
    }

    /// Adds one judge score and returns the updated solve rate.
    pub fn record_judgment(&mut self, id: u64, p_qa: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p_qa) {
            return Err(Error::InvalidInput(format!(
                "judge score {p_qa} outside [0, 1]"
            )));
        }
        let &pos = self.index.get(&id).ok_or(Error::MissingRecord(id))?;
        let record = &mut self.records[pos];
        record.judge_score_sum += p_qa;
        record.answer_count += 1;
        Ok(record.solve_rate())
    }

    /// Sampling weights under `rule`, in storage order.
    pub fn weights(&self, rule: PriorityRule) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| priority_with(r, rule, self.config.priority_floor))
            .collect()
    }

    /// `n` i.i.d. draws with replacement under the Eq.-7 priority.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&QuestionRecord<P>>> {
        self.sample_with(n, PriorityRule::Learnability, rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        n: usize,
        rule: PriorityRule,
        rng: &mut R,
    ) -> Result<Vec<&QuestionRecord<P>>> {
        Ok(self
            .sample_indices(n, rule, rng)?
            .into_iter()
            .map(|i| &self.records[i])
            .collect())
    }

    pub fn sample_ids<R: Rng + ?Sized>(
        &self,
        n: usize,
        rule: PriorityRule,
        rng: &mut R,
    ) -> Result<Vec<u64>> {
        Ok(self
            .sample_indices(n, rule, rng)?
            .into_iter()
            .map(|i| self.records[i].id)
            .collect())
    }

    fn sample_indices<R: Rng + ?Sized>(
        &self,
        n: usize,
        rule: PriorityRule,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if self.records.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let mut weights = self.weights(rule);
        // all-zero priorities (v or c_v of 0 everywhere) degrade to uniform
        if weights.iter().all(|&w| w <= 0.0) {
            weights.iter_mut().for_each(|w| *w = 1.0);
        }
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut total = 0.0;
        for w in &weights {
            total += w;
            cumulative.push(total);
        }
        Ok((0..n)
            .map(|_| {
                let u = rng.gen::<f64>() * total;
                cumulative
                    .partition_point(|&c| c <= u)
                    .min(cumulative.len() - 1)
            })
            .collect())
    }

    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("<snapshot>", e);
        writeln!(
            out,
            "# id\tv\tc_v\tjudge_score_sum\tanswer_count\tinsertion_step\tpayload"
        )
        .map_err(io)?;
        for r in &self.records {
            let payload = r.payload.encode();
            debug_assert!(!payload.contains(['\t', '\n']));
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.id, r.v, r.c_v, r.judge_score_sum, r.answer_count, r.insertion_step, payload
            )
            .map_err(io)?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(config: BufferConfig, input: R) -> Result<Self> {
        let mut buffer = Self::new(config)?;
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<snapshot>", e))?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| Error::Snapshot {
                line: lineno + 1,
                reason,
            };
            let fields: Vec<&str> = line.splitn(7, '\t').collect();
            if fields.len() != 7 {
                return Err(bad(format!("expected 7 fields, found {}", fields.len())));
            }
            let float = |s: &str, name: &str| {
                s.parse::<f64>()
                    .map_err(|e| bad(format!("{name}: {e}")))
            };
            let int = |s: &str, name: &str| {
                s.parse::<u64>()
                    .map_err(|e| bad(format!("{name}: {e}")))
            };
            let record = QuestionRecord {
                id: int(fields[0], "id")?,
                v: float(fields[1], "v")?,
                c_v: float(fields[2], "c_v")?,
                judge_score_sum: float(fields[3], "judge_score_sum")?,
                answer_count: int(fields[4], "answer_count")?,
                insertion_step: int(fields[5], "insertion_step")?,
                payload: P::decode(fields[6]).map_err(|e| bad(format!("payload: {e}")))?,
            };
            buffer.insert(record).map_err(|e| bad(e.to_string()))?;
        }
        Ok(buffer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(id: u64, v: f64, c_v: f64, scores: &[f64], step: u64) -> QuestionRecord<String> {
        let mut r = QuestionRecord::new(id, format!("q{id}"), v, c_v, step);
        r.judge_score_sum = scores.iter().sum();
        r.answer_count = scores.len() as u64;
        r
    }

    fn buffer(capacity: usize) -> ReplayBuffer<String> {
        ReplayBuffer::new(BufferConfig {
            capacity,
            priority_floor: 0.1,
        })
        .unwrap()
    }

    #[test]
    fn priority_examples() {
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(priority(&rec(0, 1.0, 1.0, &[0.5], 0), 0.1), 1.0));
        assert!(close(priority(&rec(0, 1.0, 1.0, &[1.0], 0), 0.1), 0.1));
        assert!(close(priority(&rec(0, 0.8, 0.5, &[0.25], 0), 0.1), 0.30));
        // cold start uses p = 0.5
        assert!(close(priority(&rec(0, 1.0, 1.0, &[], 0), 0.1), 1.0));
    }

    #[test]
    fn solve_rate_bookkeeping() {
        let mut b = buffer(4);
        b.insert(rec(1, 1.0, 1.0, &[], 0)).unwrap();
        b.insert(rec(2, 1.0, 1.0, &[], 0)).unwrap();
        b.insert(rec(3, 1.0, 1.0, &[], 0)).unwrap();
        b.record_judgment(1, 1.0).unwrap();
        assert_eq!(b.record_judgment(1, 0.0).unwrap(), 0.5);
        assert!((b.record_judgment(2, 0.7).unwrap() - 0.7).abs() < 1e-12);
        for s in [0.8, 0.6, 0.4] {
            b.record_judgment(3, s).unwrap();
        }
        assert!((b.record_judgment(3, 0.2).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(b.record_judgment(9, 0.5), Err(Error::MissingRecord(9))));
        assert!(b.record_judgment(1, 1.5).is_err());
    }

    #[test]
    fn insert_and_duplicates() {
        let mut b = buffer(3);
        assert_eq!(b.insert(rec(1, 1.0, 1.0, &[], 0)).unwrap(), InsertOutcome::Inserted);
        assert_eq!(b.len(), 1);
        assert!(matches!(
            b.insert(rec(1, 0.5, 0.5, &[], 1)),
            Err(Error::DuplicateId(1))
        ));
        assert!(b.insert(rec(2, 1.5, 0.5, &[], 1)).is_err());
    }

    #[test]
    fn eviction_at_capacity() {
        // priorities: id 1 -> 0.30, id 2 -> 1.0, id 3 -> 0.1
        let seed = || {
            let mut b = buffer(3);
            b.insert(rec(1, 0.8, 0.5, &[0.25], 0)).unwrap();
            b.insert(rec(2, 1.0, 1.0, &[0.5], 1)).unwrap();
            b.insert(rec(3, 1.0, 1.0, &[1.0], 2)).unwrap();
            b
        };

        let mut b = seed();
        let out = b.insert(rec(4, 1.0, 0.5, &[0.5], 3)).unwrap();
        assert_eq!(out, InsertOutcome::Evicted(3));
        assert_eq!(b.len(), 3);
        assert!(!b.contains(3) && b.contains(4));

        // new priority 0.05 below the current minimum 0.1
        let mut b = seed();
        let out = b.insert(rec(5, 0.5, 0.1, &[], 3)).unwrap();
        assert_eq!(out, InsertOutcome::Evicted(3));
        assert_eq!(b.min_priority_id(), Some(5));
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn eviction_ties_remove_oldest() {
        let mut b = buffer(2);
        b.insert(rec(10, 1.0, 1.0, &[1.0], 5)).unwrap();
        b.insert(rec(11, 1.0, 1.0, &[1.0], 4)).unwrap();
        assert_eq!(
            b.insert(rec(12, 1.0, 1.0, &[1.0], 6)).unwrap(),
            InsertOutcome::Evicted(11)
        );
    }

    #[test]
    fn sampling_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = buffer(8);
        assert!(matches!(b.sample(1, &mut rng), Err(Error::EmptyBuffer)));
        b.insert(rec(7, 0.3, 0.2, &[0.9], 0)).unwrap();
        assert!(b.sample(50, &mut rng).unwrap().iter().all(|r| r.id == 7));

        let a = b.sample_ids(20, PriorityRule::Learnability, &mut ChaCha8Rng::seed_from_u64(1));
        let c = b.sample_ids(20, PriorityRule::Learnability, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a.unwrap(), c.unwrap());
    }

    #[test]
    fn two_record_frequency() {
        // priorities 0.9 and 0.1
        let mut b = buffer(8);
        b.insert(rec(1, 0.9, 1.0, &[0.5], 0)).unwrap();
        b.insert(rec(2, 0.1, 1.0, &[0.5], 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = b.sample_ids(100_000, PriorityRule::Learnability, &mut rng).unwrap();
        let freq = draws.iter().filter(|&&id| id == 1).count() as f64 / 1e5;
        assert!((freq - 0.9).abs() < 0.01, "{freq}");
    }

    #[test]
    fn equal_priorities_are_uniform() {
        let mut b = buffer(16);
        for id in 0..10 {
            b.insert(rec(id, 0.7, 0.7, &[0.5], id)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 50_000;
        let mut counts = [0usize; 10];
        for id in b.sample_ids(n, PriorityRule::Learnability, &mut rng).unwrap() {
            counts[id as usize] += 1;
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // chi-square, 9 dof, p = 0.001 critical value
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn one_minus_p_prefers_hard_questions() {
        let r = rec(0, 1.0, 1.0, &[0.2], 0);
        assert!((priority_with(&r, PriorityRule::OneMinusP, 0.1) - 0.8).abs() < 1e-12);
        let solved = rec(0, 1.0, 1.0, &[1.0], 0);
        assert!((priority_with(&solved, PriorityRule::OneMinusP, 0.1) - 0.1).abs() < 1e-12);
        assert_eq!(priority_with(&solved, PriorityRule::Uniform, 0.1), 1.0);
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let mut b = buffer(8);
        b.insert(rec(1, 7.0 / 9.0, 0.123456789012345, &[0.1, 0.2, 1.0 / 3.0], 0)).unwrap();
        b.insert(rec(2, 1.0, 1e-17, &[], 4)).unwrap();
        let mut bytes = Vec::new();
        b.write_snapshot(&mut bytes).unwrap();
        let back = ReplayBuffer::<String>::read_snapshot(*b.config(), bytes.as_slice()).unwrap();
        assert_eq!(back.records(), b.records());
        for (x, y) in back.records().iter().zip(b.records()) {
            assert_eq!(back.priority_of(x).to_bits(), b.priority_of(y).to_bits());
        }
        assert!(ReplayBuffer::<String>::read_snapshot(*b.config(), "1\t0.5\n".as_bytes()).is_err());
    }
}
