//! Distillation of the unpruned teacher into a pruned student.
//!
//! The student is trained to match the teacher's hidden states and attention
//! probabilities at aligned layers, plus the output logits, all under mean
//! squared error. Student layer `l` is aligned with the teacher layer it
//! originally was, which [`map_layer`] recovers from the set of dropped
//! indices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{AdapterSet, Binding, TapeTrace, Trace, TransformerModel};
use crate::numerics::{clip_grad_norm, AdamConfig, OptimizerState, Tape, Tensor, Var};
use crate::train::{sample_windows, GRAD_CLIP};

/// Ascending original indices (0-based) of every block removed so far.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    dropped: Vec<usize>,
}

impl DropRecord {
    pub fn new(mut dropped: Vec<usize>, teacher_layers: usize) -> Result<Self> {
        dropped.sort_unstable();
        ensure!(
            dropped.windows(2).all(|w| w[0] < w[1]),
            "drop record {dropped:?} contains duplicates"
        );
        ensure!(
            dropped.iter().all(|&d| d < teacher_layers),
            "drop record {dropped:?} has indices >= teacher layer count {teacher_layers}"
        );
        ensure!(
            dropped.len() < teacher_layers,
            "drop record {dropped:?} removes every layer"
        );
        Ok(Self { dropped })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// The drop record implied by a pruned model's history.
    pub fn from_model(model: &TransformerModel) -> Result<Self> {
        Self::new(model.drop_history().to_vec(), model.original_layers())
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn len(&self) -> usize {
        self.dropped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dropped.is_empty()
    }
}

/// Teacher layer aligned with student layer `l`, both 1-based.
///
/// Solves `m = l + |{d ∈ D : d < m}|` for the `m` outside `D` by iterating
/// `m ← l + |{d ∈ D : d ≤ m}|` from `m = l`. The iteration only moves upward
/// and stops at the `l`-th surviving teacher layer.
pub fn map_layer(l: usize, drop: &DropRecord, teacher_layers: usize) -> Result<usize> {
    let student_layers = teacher_layers.checked_sub(drop.len()).unwrap_or(0);
    ensure!(
        (1..=student_layers).contains(&l),
        "map_layer: student layer {l} outside 1..={student_layers}"
    );
    // Stored indices are 0-based; shift to the 1-based numbering of `l`.
    let count_le = |m: usize| drop.dropped.iter().take_while(|&&d| d + 1 <= m).count();
    let mut m = l;
    loop {
        let next = l + count_le(m);
        if next == m {
            return Ok(m);
        }
        m = next;
    }
}

/// 0-based variant of [`map_layer`] for student block positions.
pub fn teacher_position(student_pos: usize, drop: &DropRecord, teacher_layers: usize) -> Result<usize> {
    Ok(map_layer(student_pos + 1, drop, teacher_layers)? - 1)
}

/// The three distillation terms and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KDLossBreakdown {
    pub hidden_term: f64,
    pub attention_term: f64,
    pub logit_term: f64,
    pub total: f64,
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            op: "kd_loss",
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}

fn check_layers(teacher_layers: usize, student_layers: usize, drop: &DropRecord) -> Result<()> {
    ensure!(
        drop.dropped.iter().all(|&d| d < teacher_layers),
        "drop record {:?} does not fit a {teacher_layers}-layer teacher",
        drop.dropped
    );
    ensure!(
        student_layers + drop.len() == teacher_layers,
        "student has {student_layers} layers, teacher {teacher_layers}, drop record {}",
        drop.len()
    );
    Ok(())
}

/// Distillation loss between two traces of the same input.
pub fn kd_loss(teacher: &Trace, student: &Trace, drop: &DropRecord) -> Result<KDLossBreakdown> {
    let tl = teacher.block_hidden.len();
    check_layers(tl, student.block_hidden.len(), drop)?;
    let mut out = KDLossBreakdown::default();
    for (l, (hs, as_)) in student
        .block_hidden
        .iter()
        .zip(&student.block_attention)
        .enumerate()
    {
        let m = teacher_position(l, drop, tl)?;
        out.hidden_term += mse(&teacher.block_hidden[m], hs)?;
        out.attention_term += mse(&teacher.block_attention[m], as_)?;
    }
    out.logit_term = mse(&teacher.logits, &student.logits)?;
    out.total = out.hidden_term + out.attention_term + out.logit_term;
    Ok(out)
}

/// Differentiable form of [`kd_loss`] with the student recorded on `tape`.
/// Returns the scalar total and the term values.
pub fn kd_loss_on_tape(
    tape: &mut Tape,
    teacher: &Trace,
    student: &TapeTrace,
    drop: &DropRecord,
) -> Result<(Var, KDLossBreakdown)> {
    let tl = teacher.block_hidden.len();
    check_layers(tl, student.block_hidden.len(), drop)?;
    let mut hidden = Vec::new();
    let mut attention = Vec::new();
    for (l, (&hs, &as_)) in student
        .block_hidden
        .iter()
        .zip(&student.block_attention)
        .enumerate()
    {
        let m = teacher_position(l, drop, tl)?;
        let ht = tape.constant(teacher.block_hidden[m].clone());
        hidden.push(tape.mse(hs, ht)?);
        let at = tape.constant(teacher.block_attention[m].clone());
        attention.push(tape.mse(as_, at)?);
    }
    let zt = tape.constant(teacher.logits.clone());
    let logit = tape.mse(student.logits, zt)?;

    let mut breakdown = KDLossBreakdown::default();
    let mut total = logit;
    breakdown.logit_term = tape.value(logit).item() as f64;
    for &h in &hidden {
        breakdown.hidden_term += tape.value(h).item() as f64;
        total = tape.add(total, h)?;
    }
    for &a in &attention {
        breakdown.attention_term += tape.value(a).item() as f64;
        total = tape.add(total, a)?;
    }
    breakdown.total = breakdown.hidden_term + breakdown.attention_term + breakdown.logit_term;
    Ok((total, breakdown))
}

fn default_alpha() -> f32 {
    16.0
}

/// Recovery-phase hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    /// Tokens consumed in one pass; the step count is
    /// `token_budget / (batch_size · max_seq_len)` micro-batches.
    pub token_budget: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub learning_rate: f32,
    pub max_seq_len: usize,
    /// 0 trains every parameter; otherwise only adapters of this rank.
    pub adapter_rank: usize,
    /// Adapter scale is `adapter_alpha / adapter_rank`.
    #[serde(default = "default_alpha")]
    pub adapter_alpha: f32,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            token_budget: 100_000,
            batch_size: 8,
            grad_accum_steps: 1,
            learning_rate: 1e-3,
            max_seq_len: 128,
            adapter_rank: 8,
            adapter_alpha: default_alpha(),
            seed: 0,
        }
    }
}

impl RecoveryConfig {
    /// The hyperparameters used for 7-8B models: rank-32 adapters, batch 4
    /// with 8 accumulation steps, learning rate 1e-4, 512-token sequences,
    /// about 2.5M tokens.
    pub fn large_scale() -> Self {
        Self {
            token_budget: 2_500_000,
            batch_size: 4,
            grad_accum_steps: 8,
            learning_rate: 1e-4,
            max_seq_len: 512,
            adapter_rank: 32,
            adapter_alpha: 64.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.token_budget > 0, "recovery token_budget must be positive");
        ensure!(self.batch_size > 0, "recovery batch_size must be positive");
        ensure!(self.grad_accum_steps > 0, "recovery grad_accum_steps must be positive");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "recovery learning_rate must be positive"
        );
        ensure!(self.max_seq_len > 0, "recovery max_seq_len must be positive");
        Ok(())
    }

    pub fn micro_batches(&self) -> usize {
        self.token_budget / (self.batch_size * self.max_seq_len)
    }
}

/// Loss averaged over the micro-batches of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub loss: KDLossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryLog {
    pub steps: Vec<StepLoss>,
    pub tokens_seen: usize,
}

impl RecoveryLog {
    pub fn initial_total(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss.total)
    }

    pub fn final_total(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss.total)
    }

    pub fn mean_total(&self) -> Option<f64> {
        if self.steps.is_empty() {
            return None;
        }
        Some(self.steps.iter().map(|s| s.loss.total).sum::<f64>() / self.steps.len() as f64)
    }
}

fn check_compatible(teacher: &TransformerModel, student: &TransformerModel, cfg: &RecoveryConfig) -> Result<()> {
    let (t, s) = (&teacher.config, &student.config);
    ensure!(
        t.d_model == s.d_model && t.n_heads == s.n_heads && t.vocab_size == s.vocab_size,
        "teacher (d_model {}, heads {}, vocab {}) and student (d_model {}, heads {}, vocab {}) differ",
        t.d_model,
        t.n_heads,
        t.vocab_size,
        s.d_model,
        s.n_heads,
        s.vocab_size
    );
    ensure!(
        teacher.n_layers() == student.original_layers(),
        "teacher has {} layers but the student was pruned from a {}-layer model",
        teacher.n_layers(),
        student.original_layers()
    );
    ensure!(
        cfg.max_seq_len <= t.max_seq_len.min(s.max_seq_len),
        "recovery max_seq_len {} exceeds model context {}",
        cfg.max_seq_len,
        t.max_seq_len.min(s.max_seq_len)
    );
    Ok(())
}

/// Trains `student` toward the frozen `teacher` for one pass over the token
/// budget. With `adapter_rank > 0` only adapter factors train, and they are
/// merged into the returned model's weights at the end.
pub fn recover(
    teacher: &TransformerModel,
    student: &TransformerModel,
    data: &[u32],
    cfg: &RecoveryConfig,
) -> Result<(TransformerModel, RecoveryLog)> {
    cfg.validate()?;
    ensure!(!data.is_empty(), "recover: empty training data");
    ensure!(
        data.len() >= cfg.max_seq_len,
        "recover: {} tokens of data cannot fill one {}-token sequence",
        data.len(),
        cfg.max_seq_len
    );
    check_compatible(teacher, student, cfg)?;
    let drop = DropRecord::from_model(student)?;

    let mut out = student.clone();
    let mut log = RecoveryLog::default();
    let micro = cfg.micro_batches();
    if micro == 0 {
        return Ok((out, log));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adapters = if cfg.adapter_rank > 0 {
        Some(AdapterSet::attach(
            student,
            cfg.adapter_rank,
            cfg.adapter_alpha,
            cfg.seed.wrapping_add(0x5eed),
        )?)
    } else {
        None
    };
    let mut opt = match &adapters {
        Some(a) => OptimizerState::new(AdamConfig::with_lr(cfg.learning_rate), &a.factors()),
        None => {
            let params: Vec<&Tensor> = out.params().into_iter().map(|(_, t)| t).collect();
            OptimizerState::new(AdamConfig::with_lr(cfg.learning_rate), &params)
        }
    };

    let mut accum: Option<Vec<Tensor>> = None;
    let mut accum_loss = KDLossBreakdown::default();
    let mut in_step = 0usize;
    for mb in 0..micro {
        let batch = sample_windows(data, cfg.batch_size, cfg.max_seq_len, &mut rng);
        let teacher_trace = teacher.forward_with_trace(&batch)?;
        let mut tape = Tape::new();
        let binding = match &adapters {
            Some(a) => Binding::Adapters(a),
            None => Binding::Full,
        };
        let st = out.forward_on_tape(&mut tape, &batch, binding)?;
        let (loss, breakdown) = kd_loss_on_tape(&mut tape, &teacher_trace, &st, &drop)?;
        if !breakdown.total.is_finite() {
            return Err(Error::contract(format!("recover: non-finite loss at micro-batch {mb}")));
        }
        let mut grads = tape.backward(loss)?;
        let trainable: Vec<Var> = match &adapters {
            Some(_) => st.adapter_factors.iter().flat_map(|&(_, _, d, u)| [d, u]).collect(),
            None => st.params.iter().map(|&(_, v)| v).collect(),
        };
        let step_grads: Vec<Tensor> = trainable
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .ok_or_else(|| Error::contract("recover: trainable parameter received no gradient"))
            })
            .collect::<Result<_>>()?;
        match &mut accum {
            None => accum = Some(step_grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&step_grads) {
                    for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
        accum_loss.hidden_term += breakdown.hidden_term;
        accum_loss.attention_term += breakdown.attention_term;
        accum_loss.logit_term += breakdown.logit_term;
        accum_loss.total += breakdown.total;
        in_step += 1;

        if in_step == cfg.grad_accum_steps || mb + 1 == micro {
            let mut g = accum.take().expect("accumulated at least one micro-batch");
            let inv = 1.0 / in_step as f32;
            for t in g.iter_mut() {
                for v in t.data_mut() {
                    *v *= inv;
                }
            }
            clip_grad_norm(&mut g, GRAD_CLIP);
            let grad_refs: Vec<Option<&Tensor>> = g.iter().map(Some).collect();
            match &mut adapters {
                Some(a) => opt.adam_step(&mut a.factors_mut(), &grad_refs)?,
                None => opt.adam_step(&mut out.params_mut(), &grad_refs)?,
            }
            let n = in_step as f64;
            log.steps.push(StepLoss {
                step: log.steps.len(),
                loss: KDLossBreakdown {
                    hidden_term: accum_loss.hidden_term / n,
                    attention_term: accum_loss.attention_term / n,
                    logit_term: accum_loss.logit_term / n,
                    total: accum_loss.total / n,
                },
            });
            accum_loss = KDLossBreakdown::default();
            in_step = 0;
        }
        log.tokens_seen += cfg.batch_size * cfg.max_seq_len;
    }

    if let Some(mut a) = adapters {
        a.merge_into(&mut out)?;
    }
    Ok((out, log))
}
