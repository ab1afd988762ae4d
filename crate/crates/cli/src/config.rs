//! Experiment configuration files.

use std::path::Path;

use aha_core::model::ModelConfig;
use aha_core::tasks::TaskMix;
use aha_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Configuration problems; reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Held-out samples evaluated after training.
    pub samples: usize,
    /// Gate traces written for later analysis (first N evaluated samples).
    pub traces: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            samples: 64,
            traces: 16,
        }
    }
}

/// Everything needed to reproduce one run. `seed` is the only source of
/// randomness; it overrides `model.seed` and `train.seed` when resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tasks: TaskMix,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tasks: TaskMix::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Sub-seed for a named random stream.
pub fn substream(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded into the seed with a splitmix finalizer.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        match serde_json::from_str::<Self>(text) {
            Ok(c) => c.resolved(),
            Err(e) => {
                let hint = serde_json::from_str::<Value>(text)
                    .ok()
                    .and_then(|v| list_hint(&v));
                Err(ConfigError(match hint {
                    Some(h) => format!("{h} (line {}, column {})", e.line(), e.column()),
                    None => e.to_string(),
                }))
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    /// Copy with the seed propagated and every section validated.
    pub fn resolved(mut self) -> Result<Self, ConfigError> {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        let err = |e: aha_core::Error| ConfigError(e.to_string());
        self.model.validate().map_err(err)?;
        self.train.validate().map_err(err)?;
        self.tasks.validate().map_err(err)?;
        if self.tasks.length > self.model.max_seq_len {
            return Err(ConfigError(format!(
                "tasks.length {} exceeds model.max_seq_len {}",
                self.tasks.length, self.model.max_seq_len
            )));
        }
        if self.eval.samples == 0 {
            return Err(ConfigError("eval.samples must be positive".into()));
        }
        Ok(self)
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn list_hint(v: &Value) -> Option<String> {
    let is_list = |p: &str| v.pointer(p).is_some_and(Value::is_array);
    if is_list("/train/lambda") || is_list("/lambda") {
        return Some("lambda must be a single number; use `aha sweep --axis lambda=...` to train several values".into());
    }
    if is_list("/model/window") || is_list("/window") {
        return Some("model.window must be a single number; use `aha sweep --axis w=...` to train several windows".into());
    }
    None
}
