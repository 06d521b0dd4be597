//! Plain-text corpus ingestion and train / validation / calibration splits.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::tokenizer;
use crate::pruning::CalibrationSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub path: PathBuf,
    /// Fraction of the stream, taken from the end, held out of training.
    pub held_out_fraction: f64,
    /// Held-out text is cut into slots of this many tokens; calibration
    /// sequences are whole slots.
    pub slot_len: usize,
    pub calibration_size: usize,
    pub split_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("crates/core/data/shakespeare.txt"),
            held_out_fraction: 0.05,
            slot_len: 128,
            calibration_size: 10,
            split_seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.path.as_os_str().is_empty(), "corpus path is empty");
        ensure!(
            self.held_out_fraction > 0.0 && self.held_out_fraction < 1.0,
            "held_out_fraction must lie in (0, 1), got {}",
            self.held_out_fraction
        );
        ensure!(self.slot_len >= 2, "slot_len must be at least 2");
        ensure!(self.calibration_size >= 1, "calibration_size must be at least 1");
        Ok(())
    }
}

/// Token ranges of each split. Together they cover `0..len` exactly once.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub validation: Vec<Range<usize>>,
    pub calibration: Vec<Range<usize>>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub bytes: Vec<u8>,
    pub tokens: Vec<u32>,
    pub splits: Splits,
}

impl Corpus {
    pub fn load(cfg: &CorpusConfig) -> Result<Self> {
        let bytes = std::fs::read(&cfg.path).map_err(|e| Error::io(&cfg.path, e))?;
        Self::from_bytes(bytes, cfg)
    }

    pub fn from_bytes(bytes: Vec<u8>, cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let tokens = tokenizer::encode(&bytes);
        let splits = split(tokens.len(), cfg, cfg.split_seed)?;
        Ok(Self { bytes, tokens, splits })
    }

    pub fn train(&self) -> &[u32] {
        &self.tokens[self.splits.train.clone()]
    }

    /// Validation slots concatenated in stream order.
    pub fn validation(&self) -> Vec<u32> {
        self.splits
            .validation
            .iter()
            .flat_map(|r| self.tokens[r.clone()].iter().copied())
            .collect()
    }

    pub fn calibration(&self) -> Result<CalibrationSet> {
        let seqs = self
            .splits
            .calibration
            .iter()
            .map(|r| self.tokens[r.clone()].to_vec())
            .collect();
        CalibrationSet::new(seqs, "held-out slots", self.splits.seed)
    }

    /// A fresh calibration sample drawn from the held-out side with another
    /// seed. Validation slots may overlap it.
    pub fn resample_calibration(&self, cfg: &CorpusConfig, seed: u64) -> Result<CalibrationSet> {
        let s = split(self.tokens.len(), cfg, seed)?;
        let seqs = s.calibration.iter().map(|r| self.tokens[r.clone()].to_vec()).collect();
        CalibrationSet::new(seqs, "held-out slots, resampled", seed)
    }

    pub fn source(path: &Path) -> String {
        path.display().to_string()
    }
}

fn split(len: usize, cfg: &CorpusConfig, seed: u64) -> Result<Splits> {
    let held = ((len as f64) * cfg.held_out_fraction).floor() as usize;
    let n_slots = held / cfg.slot_len;
    ensure!(
        n_slots > cfg.calibration_size,
        "corpus of {len} tokens holds {n_slots} held-out slots; need more than {}",
        cfg.calibration_size
    );
    let held = n_slots * cfg.slot_len;
    let start = len - held;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = sample(&mut rng, n_slots, cfg.calibration_size).into_vec();
    chosen.sort_unstable();
    let slot = |i: usize| start + i * cfg.slot_len..start + (i + 1) * cfg.slot_len;
    let calibration = chosen.iter().map(|&i| slot(i)).collect();
    let validation = (0..n_slots)
        .filter(|i| chosen.binary_search(i).is_err())
        .map(slot)
        .collect();
    Ok(Splits {
        train: 0..start,
        validation,
        calibration,
        seed,
    })
}
