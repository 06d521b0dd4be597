//! JSON run configuration shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusConfig};
use crate::error::{ensure, Error, Result};
use crate::eval::{build_probes, EvalSuite, ProbeConfig};
use crate::model::ModelConfig;
use crate::pipeline::{Retention, StopCriterion};
use crate::recovery::RecoveryConfig;
use crate::train::PretrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningConfig {
    /// Draw a new calibration sample every iteration instead of reusing one.
    pub resample_per_iteration: bool,
    pub seed: u64,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            resample_per_iteration: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub recovery_enabled: bool,
    pub retention: Retention,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            recovery_enabled: true,
            retention: Retention::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub context_len: usize,
    /// Cap on validation tokens used for perplexity.
    pub max_tokens: usize,
    pub probes: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            context_len: 128,
            max_tokens: 16_384,
            probes: ProbeConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn suite(&self, corpus: &Corpus) -> Result<EvalSuite> {
        ensure!(self.context_len >= 2, "eval context_len must be at least 2");
        let val = corpus.validation();
        let n = val.len().min(self.max_tokens);
        ensure!(n >= 2, "validation split has fewer than 2 tokens");
        Ok(EvalSuite {
            perplexity_tokens: val[..n].to_vec(),
            context_len: self.context_len,
            probes: build_probes(&val, &self.probes)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub pruning: PruningConfig,
    pub recovery: RecoveryConfig,
    pub stop: StopCriterion,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            pretrain: PretrainConfig::default(),
            pruning: PruningConfig::default(),
            recovery: RecoveryConfig::default(),
            stop: StopCriterion::target(6),
            pipeline: PipelineConfig::default(),
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

/// Extracts the first backtick-quoted name from a serde message.
fn quoted_key(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let message = msg.split(" at line ").next().unwrap_or(&msg).to_string();
            Error::Config {
                key: quoted_key(&message).unwrap_or_else(|| "<document>".into()),
                line: e.line(),
                message,
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.pretrain.validate()?;
        self.recovery.validate()?;
        self.stop.validate()?;
        ensure!(!self.out_dir.as_os_str().is_empty(), "out_dir is empty");
        Ok(())
    }

    /// Sets the global seed and derives every component seed from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.pretrain.seed = seed.wrapping_add(1);
        self.corpus.split_seed = seed.wrapping_add(2);
        self.pruning.seed = seed.wrapping_add(3);
        self.recovery.seed = seed.wrapping_add(4);
        self.eval.probes.seed = seed.wrapping_add(5);
    }
}
