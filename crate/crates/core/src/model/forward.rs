use super::adapters::{AdapterSet, Projection};
use super::{BlockParam, ParamId, TransformerModel};
use crate::error::{ensure, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Everything recorded by one forward pass.
///
/// `block_hidden[i]` is the residual stream after block `i` (`[batch, seq,
/// d_model]`), `block_attention[i]` its post-softmax attention
/// (`[batch, heads, seq, seq]`). `final_hidden` is the last block's output
/// before the final norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub block_hidden: Vec<Tensor>,
    pub block_attention: Vec<Tensor>,
    pub final_hidden: Tensor,
    pub logits: Tensor,
}

/// How parameters enter the tape.
#[derive(Clone, Copy, Debug)]
pub enum Binding<'a> {
    /// Everything constant; no gradients.
    Frozen,
    /// Every parameter trainable.
    Full,
    /// Base weights frozen; adapter factors trainable.
    Adapters(&'a AdapterSet),
}

/// Tape handles for the quantities in a [`Trace`], plus the trainable leaves.
#[derive(Clone, Debug)]
pub struct TapeTrace {
    pub block_hidden: Vec<Var>,
    pub block_attention: Vec<Var>,
    pub logits: Var,
    /// Trainable model parameters (only under [`Binding::Full`]).
    pub params: Vec<(ParamId, Var)>,
    /// Trainable adapter factors `(block, projection, down, up)`.
    pub adapter_factors: Vec<(usize, Projection, Var, Var)>,
}

impl TapeTrace {
    pub fn to_trace(&self, tape: &Tape) -> Result<Trace> {
        let block_hidden: Vec<Tensor> = self.block_hidden.iter().map(|&v| tape.value(v).clone()).collect();
        let final_hidden = block_hidden
            .last()
            .cloned()
            .ok_or_else(|| Error::contract("trace of a model with no blocks"))?;
        Ok(Trace {
            block_hidden,
            block_attention: self
                .block_attention
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect(),
            final_hidden,
            logits: tape.value(self.logits).clone(),
        })
    }
}

struct Binder<'a> {
    model: &'a TransformerModel,
    binding: Binding<'a>,
    params: Vec<(ParamId, Var)>,
    adapter_factors: Vec<(usize, Projection, Var, Var)>,
}

impl Binder<'_> {
    fn bind(&mut self, tape: &mut Tape, id: ParamId) -> Result<Var> {
        let value = self.model.param(id);
        match self.binding {
            Binding::Frozen => Ok(tape.constant(value.clone())),
            Binding::Full => {
                let v = tape.param(value.clone());
                self.params.push((id, v));
                Ok(v)
            }
            Binding::Adapters(set) => {
                if let ParamId::Block(i, p) = id {
                    if let Some(proj) = Projection::from_param(p) {
                        if let Some(adapter) = set.get(i, proj) {
                            let (w, down, up) = adapter.bind(tape)?;
                            self.adapter_factors.push((i, proj, down, up));
                            return Ok(w);
                        }
                    }
                }
                Ok(tape.constant(value.clone()))
            }
        }
    }
}

/// Checks a batch and flattens it to `usize` ids.
pub(crate) fn flatten_batch(model: &TransformerModel, tokens: &[Vec<u32>]) -> Result<(usize, usize, Vec<usize>)> {
    let batch = tokens.len();
    if batch == 0 {
        return Err(Error::input("empty token batch"));
    }
    let seq = tokens[0].len();
    if seq == 0 {
        return Err(Error::input("empty token sequence"));
    }
    if seq > model.config.max_seq_len {
        return Err(Error::input(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            model.config.max_seq_len
        )));
    }
    let mut ids = Vec::with_capacity(batch * seq);
    for (b, s) in tokens.iter().enumerate() {
        if s.len() != seq {
            return Err(Error::input(format!(
                "ragged batch: sequence {b} has length {} but sequence 0 has {seq}",
                s.len()
            )));
        }
        for (t, &id) in s.iter().enumerate() {
            if id as usize >= model.config.vocab_size {
                return Err(Error::input(format!(
                    "token {id} at sequence {b} position {t} is outside vocab of {}",
                    model.config.vocab_size
                )));
            }
            ids.push(id as usize);
        }
    }
    Ok((batch, seq, ids))
}

impl TransformerModel {
    /// Records a causal forward pass over an equal-length batch on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, tokens: &[Vec<u32>], binding: Binding<'_>) -> Result<TapeTrace> {
        ensure!(!self.blocks.is_empty(), "forward on a model with no blocks");
        let (batch, seq, ids) = flatten_batch(self, tokens)?;
        let heads = self.config.n_heads;
        let attn_scale = 1.0 / (self.config.head_dim() as f32).sqrt();
        let mut b = Binder {
            model: self,
            binding,
            params: Vec::new(),
            adapter_factors: Vec::new(),
        };

        let tok_table = b.bind(tape, ParamId::TokenEmbedding)?;
        let pos_table = b.bind(tape, ParamId::PositionEmbedding)?;
        let tok = tape.embedding(tok_table, &ids, &[batch, seq])?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = tape.embedding(pos_table, &positions, &[batch, seq])?;
        let mut x = tape.add(tok, pos)?;

        let mut block_hidden = Vec::with_capacity(self.blocks.len());
        let mut block_attention = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            let mut p = |tape: &mut Tape, bp: BlockParam| b.bind(tape, ParamId::Block(i, bp));
            let g1 = p(tape, BlockParam::Ln1Gain)?;
            let b1 = p(tape, BlockParam::Ln1Bias)?;
            let wq = p(tape, BlockParam::Wq)?;
            let wk = p(tape, BlockParam::Wk)?;
            let wv = p(tape, BlockParam::Wv)?;
            let wo = p(tape, BlockParam::Wo)?;
            let g2 = p(tape, BlockParam::Ln2Gain)?;
            let b2 = p(tape, BlockParam::Ln2Bias)?;
            let w1 = p(tape, BlockParam::W1)?;
            let w2 = p(tape, BlockParam::W2)?;

            let h = tape.layernorm(x, g1, b1)?;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let q = tape.split_heads(q, heads)?;
            let k = tape.split_heads(k, heads)?;
            let v = tape.split_heads(v, heads)?;
            let scores = tape.batched_matmul(q, k, true)?;
            let scores = tape.scale(scores, attn_scale);
            let probs = tape.causal_softmax(scores)?;
            let ctx = tape.batched_matmul(probs, v, false)?;
            let ctx = tape.merge_heads(ctx, heads)?;
            let attn_out = tape.matmul(ctx, wo)?;
            let x_mid = tape.add(x, attn_out)?;

            let h2 = tape.layernorm(x_mid, g2, b2)?;
            let up = tape.matmul(h2, w1)?;
            let act = tape.gelu(up);
            let down = tape.matmul(act, w2)?;
            x = tape.add(x_mid, down)?;

            block_hidden.push(x);
            block_attention.push(tape.reshape(probs, &[batch, heads, seq, seq])?);
        }

        let gf = b.bind(tape, ParamId::FinalGain)?;
        let bf = b.bind(tape, ParamId::FinalBias)?;
        let head = b.bind(tape, ParamId::Output)?;
        let normed = tape.layernorm(x, gf, bf)?;
        let logits = tape.matmul(normed, head)?;

        Ok(TapeTrace {
            block_hidden,
            block_attention,
            logits,
            params: b.params,
            adapter_factors: b.adapter_factors,
        })
    }

    /// Forward pass returning hidden states, attentions, and logits.
    pub fn forward_with_trace(&self, tokens: &[Vec<u32>]) -> Result<Trace> {
        let mut tape = Tape::new();
        let tt = self.forward_on_tape(&mut tape, tokens, Binding::Frozen)?;
        tt.to_trace(&tape)
    }

    /// Same as [`forward_with_trace`](Self::forward_with_trace) but routes
    /// projections through `adapters` without merging them.
    pub fn forward_with_adapters(&self, tokens: &[Vec<u32>], adapters: &AdapterSet) -> Result<Trace> {
        let mut tape = Tape::new();
        let tt = self.forward_on_tape(&mut tape, tokens, Binding::Adapters(adapters))?;
        tt.to_trace(&tape)
    }

    /// Logits `[batch, seq, vocab]` only.
    pub fn forward_logits(&self, tokens: &[Vec<u32>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let tt = self.forward_on_tape(&mut tape, tokens, Binding::Frozen)?;
        Ok(tape.value(tt.logits).clone())
    }

    /// Final-block hidden states `[batch, seq, d_model]` only.
    pub fn forward_final_hidden(&self, tokens: &[Vec<u32>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let tt = self.forward_on_tape(&mut tape, tokens, Binding::Frozen)?;
        let last = *tt.block_hidden.last().expect("at least one block");
        Ok(tape.value(last).clone())
    }
}
