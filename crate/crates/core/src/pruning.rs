//! Block importance by output similarity, and single-block removal.
//!
//! A block's score is the mean cosine similarity between the unpruned
//! model's final hidden states and those of the same model with only that
//! block removed. The block whose removal changes the output least (the
//! highest score) is the one dropped.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::TransformerModel;
use crate::numerics::Tensor;

/// Small fixed sample of sequences used only for scoring blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
    pub source: String,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn new(sequences: Vec<Vec<u32>>, source: impl Into<String>, seed: u64) -> Result<Self> {
        ensure!(!sequences.is_empty(), "calibration set is empty");
        for (i, s) in sequences.iter().enumerate() {
            ensure!(
                s.len() >= 2,
                "calibration sequence {i} has length {} (< 2)",
                s.len()
            );
        }
        Ok(Self {
            sequences,
            source: source.into(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Scores for one pruning decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// Mean similarity per current block position.
    pub scores: Vec<f64>,
    /// Position of the block selected for removal.
    pub chosen: usize,
    /// Original index of the selected block.
    pub chosen_origin: usize,
    /// `per_sequence[block][sequence]` similarities.
    pub per_sequence: Vec<Vec<f64>>,
}

/// Mean cosine similarity between corresponding vectors along the last axis.
///
/// A pair in which either vector is all zeros contributes 0.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    let n = a.last_dim();
    let rows = a.numel() / n;
    let mut total = 0.0f64;
    for (ra, rb) in a.data().chunks_exact(n).zip(b.data().chunks_exact(n)) {
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in ra.iter().zip(rb) {
            let (x, y) = (x as f64, y as f64);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na > 0.0 && nb > 0.0 {
            total += (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
        }
    }
    Ok(total / rows as f64)
}

/// Index of the largest score; ties go to the lowest index.
pub fn select_block(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if s <= scores[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Scores every block of `model` on `calib`.
pub fn score_blocks(model: &TransformerModel, calib: &CalibrationSet) -> Result<ImportanceReport> {
    score_blocks_observed(model, calib, &mut |_, _| {})
}

/// [`score_blocks`] with a hook called once per candidate model, before it
/// is evaluated, with the removed position.
pub fn score_blocks_observed(
    model: &TransformerModel,
    calib: &CalibrationSet,
    on_candidate: &mut dyn FnMut(usize, &TransformerModel),
) -> Result<ImportanceReport> {
    ensure!(!calib.is_empty(), "score_blocks: empty calibration set");
    ensure!(
        model.n_layers() >= 2,
        "score_blocks: model needs at least 2 blocks, has {}",
        model.n_layers()
    );
    let reference: Vec<Tensor> = calib
        .sequences
        .iter()
        .map(|s| model.forward_final_hidden(std::slice::from_ref(s)))
        .collect::<Result<_>>()?;

    let mut per_sequence = Vec::with_capacity(model.n_layers());
    for pos in 0..model.n_layers() {
        let candidate = model.remove_block(pos)?;
        on_candidate(pos, &candidate);
        let sims = calib
            .sequences
            .iter()
            .zip(&reference)
            .map(|(s, r)| {
                let h = candidate.forward_final_hidden(std::slice::from_ref(s))?;
                cosine_similarity(r, &h)
            })
            .collect::<Result<Vec<f64>>>()?;
        per_sequence.push(sims);
    }
    let scores: Vec<f64> = per_sequence
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect();
    let chosen = select_block(&scores).expect("at least two scores");
    Ok(ImportanceReport {
        chosen_origin: model.origin_indices()[chosen],
        scores,
        chosen,
        per_sequence,
    })
}

/// Scores the blocks and removes the least important one.
pub fn prune_one(model: &TransformerModel, calib: &CalibrationSet) -> Result<(TransformerModel, ImportanceReport)> {
    let report = score_blocks(model, calib)?;
    let pruned = model.remove_block(report.chosen)?;
    Ok((pruned, report))
}
