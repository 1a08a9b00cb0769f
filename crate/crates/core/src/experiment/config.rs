//! Run configuration: one TOML file with a section per component.
//!
//! A file may name a base `profile` ("desk" or "published"); every other key
//! overrides that profile. Unknown keys are rejected.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::confidence::SignalKind;
use crate::error::{Error, Result};
use crate::orchestrator::{AblationMode, LoopConfig, LoopSetup};
use crate::ppo::OptimizerConfig;
use crate::replay::BufferConfig;
use crate::world::WorldConfig;

pub const OUT_ENV: &str = "COSE_LOOP_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub signal: SignalKind,
    pub out_dir: PathBuf,
    /// Persist per-sample weight traces for `trace`.
    pub trace_samples: bool,
    pub world: WorldConfig,
    #[serde(rename = "loop")]
    pub looping: LoopConfig,
    pub optimizer: OptimizerConfig,
    pub buffer: BufferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Toy-scale settings used by the acceptance runs: high-noise world,
    /// batch 64, 200 steps.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            signal: SignalKind::NormalizedEntropy,
            out_dir: PathBuf::from("runs/latest"),
            trace_samples: false,
            world: WorldConfig::high_noise(),
            looping: LoopConfig::desk(),
            optimizer: OptimizerConfig::desk(),
            buffer: BufferConfig::default(),
        }
    }

    /// Published hyperparameters: clip 0.2, KL 0.01, batch 128, capacity
    /// 8192, proposer phase every step, weight floor 0.1.
    pub fn published() -> Self {
        Self {
            looping: LoopConfig::published(),
            optimizer: OptimizerConfig::published(),
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "published" => Ok(Self::published()),
            other => Err(Error::config(
                "profile",
                format!("unknown profile `{other}` (expected `desk` or `published`)"),
            )),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config("config", e.to_string().trim_end()))?;
        let base = match table.remove("profile") {
            None => Self::desk(),
            Some(toml::Value::String(name)) => Self::profile(&name)?,
            Some(_) => return Err(Error::config("profile", "must be a string")),
        };
        let mut merged = toml::Table::try_from(&base)
            .map_err(|e| Error::config("<profile>", e.to_string()))?;
        merge(&mut merged, table);
        let config: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.to_string().trim_end()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Fully resolved TOML; reloading it yields an identical config.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<serialize>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed", "must be at most 2^63 - 1"));
        }
        self.setup().validate()
    }

    pub fn setup(&self) -> LoopSetup {
        LoopSetup {
            world: self.world,
            looping: self.looping,
            optimizer: self.optimizer,
            buffer: self.buffer,
            signal: self.signal,
            seed: self.seed,
        }
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(mode) = overrides.ablation {
            self.looping.ablation = mode;
        }
        if let Some(steps) = overrides.steps {
            self.looping.total_steps = steps;
        }
        if let Some(out) = &overrides.out {
            self.out_dir = out.clone();
        }
        if overrides.trace_samples {
            self.trace_samples = true;
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// Command-line overrides, applied after the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub ablation: Option<AblationMode>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub trace_samples: bool,
}

impl Overrides {
    /// Fills `out` from the environment when no flag gave one.
    pub fn with_env_out(mut self, env: Option<OsString>) -> Self {
        if self.out.is_none() {
            self.out = env.filter(|v| !v.is_empty()).map(PathBuf::from);
        }
        self
    }
}
