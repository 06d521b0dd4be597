//! Perplexity and multiple-choice probes.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::tokenizer::BOS;
use crate::model::TransformerModel;
use crate::numerics::Tensor;

/// Windows evaluated per forward pass.
const EVAL_BATCH: usize = 8;

/// Log-softmax probability of `target` under one row of logits, in f64.
fn log_prob(row: &[f32], target: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row[target] as f64 - lse
}

/// Sum of log-probabilities of `seq[from..]`, each predicted from the
/// position before it, given `logits[seq_len, vocab]` for `seq`.
pub fn continuation_logprob(logits: &Tensor, seq: &[u32], from: usize) -> f64 {
    let v = logits.last_dim();
    let rows = logits.data();
    (from.max(1)..seq.len())
        .map(|t| log_prob(&rows[(t - 1) * v..t * v], seq[t] as usize))
        .sum()
}

/// Total negative log-likelihood and prediction count over non-overlapping
/// windows of `context_len` tokens.
pub fn windowed_nll(model: &TransformerModel, tokens: &[u32], context_len: usize) -> Result<(f64, usize)> {
    ensure!(tokens.len() >= 2, "perplexity needs at least 2 tokens, got {}", tokens.len());
    ensure!(context_len >= 2, "perplexity context length must be at least 2");
    let ctx = context_len.min(model.config.max_seq_len);
    let windows: Vec<&[u32]> = tokens.chunks(ctx).filter(|w| w.len() >= 2).collect();
    let mut per_window = Vec::with_capacity(windows.len());

    let mut i = 0;
    while i < windows.len() {
        // Batch consecutive windows of equal length.
        let len = windows[i].len();
        let mut j = i;
        while j < windows.len() && j - i < EVAL_BATCH && windows[j].len() == len {
            j += 1;
        }
        let batch: Vec<Vec<u32>> = windows[i..j].iter().map(|w| w.to_vec()).collect();
        let logits = model.forward_logits(&batch)?;
        for (b, w) in batch.iter().enumerate() {
            let l = logits.index_first(b);
            per_window.push(-continuation_logprob(&l, w, 1));
        }
        i = j;
    }
    let count = windows.iter().map(|w| w.len() - 1).sum();
    Ok((per_window.iter().sum(), count))
}

/// `exp(mean next-token NLL)` over non-overlapping windows.
pub fn perplexity(model: &TransformerModel, tokens: &[u32], context_len: usize) -> Result<f64> {
    let (nll, n) = windowed_nll(model, tokens, context_len)?;
    Ok((nll / n as f64).exp())
}

/// A context with candidate continuations, one of them correct.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeItem {
    pub context: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub correct: usize,
}

impl ProbeItem {
    pub fn validate(&self, model: &TransformerModel) -> Result<()> {
        ensure!(self.candidates.len() >= 2, "probe item needs at least 2 candidates");
        ensure!(
            self.correct < self.candidates.len(),
            "probe correct index {} out of range for {} candidates",
            self.correct,
            self.candidates.len()
        );
        for c in &self.candidates {
            ensure!(!c.is_empty(), "probe candidate is empty");
            ensure!(
                c.len() < model.config.max_seq_len,
                "probe candidate of {} tokens does not fit context {}",
                c.len(),
                model.config.max_seq_len
            );
        }
        for &t in self.context.iter().chain(self.candidates.iter().flatten()) {
            if t as usize >= model.config.vocab_size {
                return Err(Error::input(format!("probe token {t} outside vocab")));
            }
        }
        Ok(())
    }
}

/// Log-likelihood of every candidate of `item`.
pub fn candidate_scores(model: &TransformerModel, item: &ProbeItem) -> Result<Vec<f64>> {
    item.validate(model)?;
    let limit = model.config.max_seq_len;
    let seqs: Vec<(Vec<u32>, usize)> = item
        .candidates
        .iter()
        .map(|c| {
            let room = limit - 1 - c.len();
            let ctx = &item.context[item.context.len().saturating_sub(room)..];
            let mut s = Vec::with_capacity(1 + ctx.len() + c.len());
            s.push(BOS);
            s.extend_from_slice(ctx);
            let from = s.len();
            s.extend_from_slice(c);
            (s, from)
        })
        .collect();

    let mut scores = vec![0.0; seqs.len()];
    let mut done = vec![false; seqs.len()];
    for i in 0..seqs.len() {
        if done[i] {
            continue;
        }
        let group: Vec<usize> = (i..seqs.len())
            .filter(|&j| !done[j] && seqs[j].0.len() == seqs[i].0.len())
            .collect();
        let batch: Vec<Vec<u32>> = group.iter().map(|&j| seqs[j].0.clone()).collect();
        let logits = model.forward_logits(&batch)?;
        for (b, &j) in group.iter().enumerate() {
            scores[j] = continuation_logprob(&logits.index_first(b), &seqs[j].0, seqs[j].1);
            done[j] = true;
        }
    }
    Ok(scores)
}

/// Fraction of items whose highest-likelihood candidate is the correct one.
/// Ties go to the lowest candidate index.
pub fn choice_accuracy(model: &TransformerModel, items: &[ProbeItem]) -> Result<f64> {
    ensure!(!items.is_empty(), "choice_accuracy: no items");
    let mut correct = 0usize;
    for item in items {
        let scores = candidate_scores(model, item)?;
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = i;
            }
        }
        if best == item.correct {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Perplexity plus named probe accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSuite {
    pub perplexity: f64,
    pub probes: BTreeMap<String, f64>,
}

/// How synthetic probes are cut from held-out text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub items_per_family: usize,
    pub context_len: usize,
    pub continuation_len: usize,
    pub candidates: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            items_per_family: 64,
            context_len: 48,
            continuation_len: 16,
            candidates: 4,
            seed: 0,
        }
    }
}

/// Probe families generated by [`build_probes`].
pub const PROBE_FAMILIES: [&str; 2] = ["next_span", "char_swap"];

fn place_correct<R: Rng>(correct: Vec<u32>, mut distractors: Vec<Vec<u32>>, rng: &mut R) -> (Vec<Vec<u32>>, usize) {
    let pos = rng.random_range(0..=distractors.len());
    distractors.insert(pos, correct);
    (distractors, pos)
}

/// Swaps a few adjacent token pairs so the result differs from `span`.
fn corrupt<R: Rng>(span: &[u32], rng: &mut R) -> Option<Vec<u32>> {
    if span.len() < 2 {
        return None;
    }
    for _ in 0..16 {
        let mut out = span.to_vec();
        for _ in 0..2.max(span.len() / 4) {
            let i = rng.random_range(0..span.len() - 1);
            out.swap(i, i + 1);
        }
        if out != span {
            return Some(out);
        }
    }
    None
}

/// Builds the probe families from a held-out token stream.
///
/// `next_span`: the true continuation against spans taken from elsewhere in
/// the stream. `char_swap`: the true continuation against copies of itself
/// with adjacent tokens swapped.
pub fn build_probes(tokens: &[u32], cfg: &ProbeConfig) -> Result<BTreeMap<String, Vec<ProbeItem>>> {
    ensure!(cfg.candidates >= 2, "probes need at least 2 candidates");
    ensure!(cfg.continuation_len >= 2, "probe continuation_len must be at least 2");
    let span = cfg.context_len + cfg.continuation_len;
    ensure!(
        tokens.len() > 2 * span,
        "probe source of {} tokens too short for {span}-token items",
        tokens.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_start = tokens.len() - span;
    let mut out = BTreeMap::new();

    let mut next_span = Vec::with_capacity(cfg.items_per_family);
    let mut guard = 0;
    while next_span.len() < cfg.items_per_family && guard < cfg.items_per_family * 100 {
        guard += 1;
        let p = rng.random_range(0..=max_start);
        let context = tokens[p..p + cfg.context_len].to_vec();
        let correct = tokens[p + cfg.context_len..p + span].to_vec();
        let mut distractors: Vec<Vec<u32>> = Vec::new();
        while distractors.len() + 1 < cfg.candidates {
            let q = rng.random_range(0..=tokens.len() - cfg.continuation_len);
            let d = tokens[q..q + cfg.continuation_len].to_vec();
            if d != correct && !distractors.contains(&d) {
                distractors.push(d);
            }
        }
        let (candidates, correct) = place_correct(correct, distractors, &mut rng);
        next_span.push(ProbeItem {
            context,
            candidates,
            correct,
        });
    }
    out.insert(PROBE_FAMILIES[0].to_string(), next_span);

    let mut char_swap = Vec::with_capacity(cfg.items_per_family);
    guard = 0;
    while char_swap.len() < cfg.items_per_family && guard < cfg.items_per_family * 100 {
        guard += 1;
        let p = rng.random_range(0..=max_start);
        let context = tokens[p..p + cfg.context_len].to_vec();
        let correct = tokens[p + cfg.context_len..p + span].to_vec();
        let mut distractors: Vec<Vec<u32>> = Vec::new();
        let mut tries = 0;
        while distractors.len() + 1 < cfg.candidates && tries < 64 {
            tries += 1;
            if let Some(d) = corrupt(&correct, &mut rng) {
                if !distractors.contains(&d) {
                    distractors.push(d);
                }
            }
        }
        if distractors.len() + 1 < cfg.candidates {
            continue;
        }
        let (candidates, correct) = place_correct(correct, distractors, &mut rng);
        char_swap.push(ProbeItem {
            context,
            candidates,
            correct,
        });
    }
    out.insert(PROBE_FAMILIES[1].to_string(), char_swap);

    for (name, items) in &out {
        ensure!(!items.is_empty(), "could not build any `{name}` probe items");
    }
    Ok(out)
}

/// Fixed evaluation data: a held-out stream for perplexity and probe sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub perplexity_tokens: Vec<u32>,
    pub context_len: usize,
    pub probes: BTreeMap<String, Vec<ProbeItem>>,
}

impl EvalSuite {
    pub fn evaluate(&self, model: &TransformerModel) -> Result<MetricSuite> {
        let perplexity = perplexity(model, &self.perplexity_tokens, self.context_len)?;
        let probes = self
            .probes
            .iter()
            .map(|(name, items)| Ok((name.clone(), choice_accuracy(model, items)?)))
            .collect::<Result<_>>()?;
        Ok(MetricSuite { perplexity, probes })
    }
}
