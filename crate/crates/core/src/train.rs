//! Next-token pretraining for the miniature teacher, and batch sampling
//! shared with the recovery loop.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{Binding, TransformerModel};
use crate::numerics::{clip_grad_norm, AdamConfig, OptimizerState, Tape, Tensor};

/// Global gradient-norm ceiling applied before every optimizer step.
pub const GRAD_CLIP: f32 = 1.0;

/// `batch` windows of `len` consecutive tokens with uniformly drawn starts.
pub fn sample_windows<R: Rng + ?Sized>(data: &[u32], batch: usize, len: usize, rng: &mut R) -> Vec<Vec<u32>> {
    assert!(data.len() >= len && len > 0, "data shorter than window");
    let max_start = data.len() - len;
    (0..batch)
        .map(|_| {
            let s = rng.random_range(0..=max_start);
            data[s..s + len].to_vec()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Input tokens consumed; `token_budget / (batch_size · seq_len)` steps.
    pub token_budget: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f32,
    /// Linear warmup length; the rate then decays by cosine to a tenth.
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            token_budget: 600_000,
            batch_size: 8,
            seq_len: 128,
            learning_rate: 3e-3,
            warmup_steps: 20,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn steps(&self) -> usize {
        self.token_budget / (self.batch_size * self.seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0, "pretrain batch_size must be positive");
        ensure!(self.seq_len > 0, "pretrain seq_len must be positive");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "pretrain learning_rate must be positive"
        );
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f32 {
        let total = self.steps().max(1);
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f32 / self.warmup_steps as f32;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let progress = (step - self.warmup_steps) as f32 / span as f32;
        let cosine = 0.5 * (1.0 + (std::f32::consts::PI * progress.min(1.0)).cos());
        self.learning_rate * (0.1 + 0.9 * cosine)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean cross-entropy (nats per token) of each step's batch.
    pub losses: Vec<f64>,
    pub tokens_seen: usize,
}

/// Trains every parameter with next-token cross-entropy on windows drawn
/// from `data`.
pub fn pretrain(model: &TransformerModel, data: &[u32], cfg: &PretrainConfig) -> Result<(TransformerModel, PretrainLog)> {
    pretrain_with_progress(model, data, cfg, &mut |_, _| {})
}

/// [`pretrain`] with a callback receiving `(step, loss)` after every step.
pub fn pretrain_with_progress(
    model: &TransformerModel,
    data: &[u32],
    cfg: &PretrainConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<(TransformerModel, PretrainLog)> {
    cfg.validate()?;
    ensure!(
        cfg.seq_len <= model.config.max_seq_len,
        "pretrain seq_len {} exceeds max_seq_len {}",
        cfg.seq_len,
        model.config.max_seq_len
    );
    let mut out = model.clone();
    let mut log = PretrainLog::default();
    let steps = cfg.steps();
    if steps == 0 {
        return Ok((out, log));
    }
    ensure!(
        data.len() > cfg.seq_len,
        "pretrain: {} tokens cannot fill one {}-token window plus target",
        data.len(),
        cfg.seq_len
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params: Vec<&Tensor> = out.params().into_iter().map(|(_, t)| t).collect();
    let mut opt = OptimizerState::new(AdamConfig::with_lr(cfg.learning_rate), &params);

    for step in 0..steps {
        let windows = sample_windows(data, cfg.batch_size, cfg.seq_len + 1, &mut rng);
        let inputs: Vec<Vec<u32>> = windows.iter().map(|w| w[..cfg.seq_len].to_vec()).collect();
        let targets: Vec<usize> = windows
            .iter()
            .flat_map(|w| w[1..].iter().map(|&t| t as usize))
            .collect();
        let mut tape = Tape::new();
        let tt = out.forward_on_tape(&mut tape, &inputs, Binding::Full)?;
        let loss = tape.cross_entropy(tt.logits, &targets)?;
        let loss_value = tape.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::contract(format!("pretrain: non-finite loss at step {step}")));
        }
        let mut grads = tape.backward(loss)?;
        let mut g: Vec<Tensor> = tt
            .params
            .iter()
            .map(|&(_, v)| grads.take(v).ok_or_else(|| Error::contract("pretrain: missing gradient")))
            .collect::<Result<_>>()?;
        clip_grad_norm(&mut g, GRAD_CLIP);
        opt.config.learning_rate = cfg.lr_at(step);
        let refs: Vec<Option<&Tensor>> = g.iter().map(Some).collect();
        opt.adam_step(&mut out.params_mut(), &refs)?;
        log.losses.push(loss_value);
        log.tokens_seen += cfg.batch_size * cfg.seq_len;
        on_step(step, loss_value);
    }
    Ok((out, log))
}
