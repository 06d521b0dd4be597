//! Pre-norm decoder-only transformer with per-block trace capture.

mod adapters;
mod checkpoint;
mod forward;
pub mod tokenizer;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

pub use adapters::{AdapterSet, Projection};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use forward::{Binding, TapeTrace, Trace};

/// Shape and seed of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            vocab_size: tokenizer::VOCAB_SIZE,
            max_seq_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::contract(format!("model config: {name} must be positive")));
            }
        }
        ensure!(
            self.d_model % self.n_heads == 0,
            "model config: d_model {} not divisible by n_heads {}",
            self.d_model,
            self.n_heads
        );
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// Parameters of one block: attention and feed-forward, each behind a
/// layer norm and a residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

/// Which tensor inside a [`Block`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockParam {
    Ln1Gain,
    Ln1Bias,
    Wq,
    Wk,
    Wv,
    Wo,
    Ln2Gain,
    Ln2Bias,
    W1,
    W2,
}

impl BlockParam {
    pub const ALL: [BlockParam; 10] = [
        BlockParam::Ln1Gain,
        BlockParam::Ln1Bias,
        BlockParam::Wq,
        BlockParam::Wk,
        BlockParam::Wv,
        BlockParam::Wo,
        BlockParam::Ln2Gain,
        BlockParam::Ln2Bias,
        BlockParam::W1,
        BlockParam::W2,
    ];

    fn name(self) -> &'static str {
        match self {
            BlockParam::Ln1Gain => "ln1.gain",
            BlockParam::Ln1Bias => "ln1.bias",
            BlockParam::Wq => "attn.wq",
            BlockParam::Wk => "attn.wk",
            BlockParam::Wv => "attn.wv",
            BlockParam::Wo => "attn.wo",
            BlockParam::Ln2Gain => "ln2.gain",
            BlockParam::Ln2Bias => "ln2.bias",
            BlockParam::W1 => "ffn.w1",
            BlockParam::W2 => "ffn.w2",
        }
    }
}

impl Block {
    pub fn get(&self, p: BlockParam) -> &Tensor {
        match p {
            BlockParam::Ln1Gain => &self.ln1_gain,
            BlockParam::Ln1Bias => &self.ln1_bias,
            BlockParam::Wq => &self.wq,
            BlockParam::Wk => &self.wk,
            BlockParam::Wv => &self.wv,
            BlockParam::Wo => &self.wo,
            BlockParam::Ln2Gain => &self.ln2_gain,
            BlockParam::Ln2Bias => &self.ln2_bias,
            BlockParam::W1 => &self.w1,
            BlockParam::W2 => &self.w2,
        }
    }

    pub fn get_mut(&mut self, p: BlockParam) -> &mut Tensor {
        match p {
            BlockParam::Ln1Gain => &mut self.ln1_gain,
            BlockParam::Ln1Bias => &mut self.ln1_bias,
            BlockParam::Wq => &mut self.wq,
            BlockParam::Wk => &mut self.wk,
            BlockParam::Wv => &mut self.wv,
            BlockParam::Wo => &mut self.wo,
            BlockParam::Ln2Gain => &mut self.ln2_gain,
            BlockParam::Ln2Bias => &mut self.ln2_bias,
            BlockParam::W1 => &mut self.w1,
            BlockParam::W2 => &mut self.w2,
        }
    }

    /// Zeroes both residual branches so the block computes the identity.
    pub fn make_identity(&mut self) {
        self.wo = Tensor::zeros(self.wo.dims());
        self.w2 = Tensor::zeros(self.w2.dims());
    }
}

/// Address of a parameter tensor in a [`TransformerModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    TokenEmbedding,
    PositionEmbedding,
    Block(usize, BlockParam),
    FinalGain,
    FinalBias,
    Output,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::TokenEmbedding => f.write_str("tok_emb"),
            ParamId::PositionEmbedding => f.write_str("pos_emb"),
            ParamId::Block(i, p) => write!(f, "blocks.{i}.{}", p.name()),
            ParamId::FinalGain => f.write_str("ln_f.gain"),
            ParamId::FinalBias => f.write_str("ln_f.bias"),
            ParamId::Output => f.write_str("lm_head"),
        }
    }
}

/// A decoder-only transformer plus bookkeeping that ties its blocks back to
/// the model it was pruned from.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub lm_head: Tensor,
    origin_indices: Vec<usize>,
    original_layers: usize,
    drop_history: Vec<usize>,
}

impl TransformerModel {
    /// Seeded scaled-normal initialization.
    ///
    /// Weights use std 0.02; the two residual output projections are further
    /// divided by `sqrt(2 · n_layers)`. Layer-norm gains start at one.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f, v, s) = (
            config.d_model,
            config.ffn_dim(),
            config.vocab_size,
            config.max_seq_len,
        );
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f32).sqrt();
        let tok_emb = Tensor::randn(&[v, d], std, &mut rng);
        let pos_emb = Tensor::randn(&[s, d], std, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_gain: Tensor::ones(&[d]),
                ln1_bias: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[d, d], std, &mut rng),
                wk: Tensor::randn(&[d, d], std, &mut rng),
                wv: Tensor::randn(&[d, d], std, &mut rng),
                wo: Tensor::randn(&[d, d], resid_std, &mut rng),
                ln2_gain: Tensor::ones(&[d]),
                ln2_bias: Tensor::zeros(&[d]),
                w1: Tensor::randn(&[d, f], std, &mut rng),
                w2: Tensor::randn(&[f, d], resid_std, &mut rng),
            })
            .collect();
        let lm_head = Tensor::randn(&[d, v], std, &mut rng);
        Ok(Self {
            origin_indices: (0..config.n_layers).collect(),
            original_layers: config.n_layers,
            drop_history: Vec::new(),
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Tensor::ones(&[d]),
            lnf_bias: Tensor::zeros(&[d]),
            lm_head,
            config,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// For each current block, its index in the original unpruned model.
    pub fn origin_indices(&self) -> &[usize] {
        &self.origin_indices
    }

    /// Layer count of the original unpruned model.
    pub fn original_layers(&self) -> usize {
        self.original_layers
    }

    /// Original indices of removed blocks, in removal order.
    pub fn drop_history(&self) -> &[usize] {
        &self.drop_history
    }

    /// Returns a copy without the block at `position`. Surviving parameters
    /// are copied bit for bit; the removed block's original index is
    /// appended to the drop history.
    pub fn remove_block(&self, position: usize) -> Result<Self> {
        ensure!(
            position < self.blocks.len(),
            "remove_block: position {position} out of range for {} blocks",
            self.blocks.len()
        );
        ensure!(
            self.blocks.len() > 1,
            "remove_block: refusing to remove the last remaining block"
        );
        let mut out = self.clone();
        out.blocks.remove(position);
        let origin = out.origin_indices.remove(position);
        out.drop_history.push(origin);
        out.config.n_layers -= 1;
        Ok(out)
    }

    /// Every parameter tensor with its address, in a fixed order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out = vec![
            (ParamId::TokenEmbedding, &self.tok_emb),
            (ParamId::PositionEmbedding, &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for p in BlockParam::ALL {
                out.push((ParamId::Block(i, p), b.get(p)));
            }
        }
        out.push((ParamId::FinalGain, &self.lnf_gain));
        out.push((ParamId::FinalBias, &self.lnf_bias));
        out.push((ParamId::Output, &self.lm_head));
        out
    }

    /// Mutable access to every parameter, in [`params`](Self::params) order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in self.blocks.iter_mut() {
            let Block {
                ln1_gain,
                ln1_bias,
                wq,
                wk,
                wv,
                wo,
                ln2_gain,
                ln2_bias,
                w1,
                w2,
            } = b;
            out.extend([ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w1, w2]);
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.lm_head]);
        out
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        match id {
            ParamId::TokenEmbedding => &self.tok_emb,
            ParamId::PositionEmbedding => &self.pos_emb,
            ParamId::Block(i, p) => self.blocks[i].get(p),
            ParamId::FinalGain => &self.lnf_gain,
            ParamId::FinalBias => &self.lnf_bias,
            ParamId::Output => &self.lm_head,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        match id {
            ParamId::TokenEmbedding => &mut self.tok_emb,
            ParamId::PositionEmbedding => &mut self.pos_emb,
            ParamId::Block(i, p) => self.blocks[i].get_mut(p),
            ParamId::FinalGain => &mut self.lnf_gain,
            ParamId::FinalBias => &mut self.lnf_bias,
            ParamId::Output => &mut self.lm_head,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params().into_iter().map(|(id, _)| id).collect()
    }

    /// Expected dims of every parameter, derived from the config.
    fn expected_dims(&self, id: ParamId) -> Vec<usize> {
        let c = &self.config;
        let (d, f) = (c.d_model, c.ffn_dim());
        match id {
            ParamId::TokenEmbedding => vec![c.vocab_size, d],
            ParamId::PositionEmbedding => vec![c.max_seq_len, d],
            ParamId::Block(_, p) => match p {
                BlockParam::Ln1Gain | BlockParam::Ln1Bias | BlockParam::Ln2Gain | BlockParam::Ln2Bias => {
                    vec![d]
                }
                BlockParam::Wq | BlockParam::Wk | BlockParam::Wv | BlockParam::Wo => vec![d, d],
                BlockParam::W1 => vec![d, f],
                BlockParam::W2 => vec![f, d],
            },
            ParamId::FinalGain | ParamId::FinalBias => vec![d],
            ParamId::Output => vec![d, c.vocab_size],
        }
    }

    /// Checks structural invariants: dims match the config and the origin
    /// bookkeeping is consistent.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        ensure!(
            self.blocks.len() == self.config.n_layers,
            "model has {} blocks but config says {}",
            self.blocks.len(),
            self.config.n_layers
        );
        for (id, t) in self.params() {
            let want = self.expected_dims(id);
            if t.dims() != want.as_slice() {
                return Err(Error::Shape {
                    op: "model parameter",
                    left: t.dims().to_vec(),
                    right: want,
                });
            }
        }
        ensure!(
            self.origin_indices.len() == self.blocks.len(),
            "origin_indices length {} != block count {}",
            self.origin_indices.len(),
            self.blocks.len()
        );
        ensure!(
            self.origin_indices.windows(2).all(|w| w[0] < w[1]),
            "origin_indices {:?} not strictly increasing",
            self.origin_indices
        );
        ensure!(
            self.origin_indices.iter().all(|&i| i < self.original_layers),
            "origin_indices {:?} exceed original layer count {}",
            self.origin_indices,
            self.original_layers
        );
        let mut all: Vec<usize> = self
            .origin_indices
            .iter()
            .chain(&self.drop_history)
            .copied()
            .collect();
        all.sort_unstable();
        ensure!(
            all == (0..self.original_layers).collect::<Vec<_>>(),
            "origin_indices {:?} and drop history {:?} do not partition 0..{}",
            self.origin_indices,
            self.drop_history,
            self.original_layers
        );
        Ok(())
    }

    pub(crate) fn set_lineage(
        &mut self,
        origin_indices: Vec<usize>,
        original_layers: usize,
        drop_history: Vec<usize>,
    ) {
        self.origin_indices = origin_indices;
        self.original_layers = original_layers;
        self.drop_history = drop_history;
    }

    /// True when every parameter is bitwise equal to `other`'s.
    pub fn params_bit_eq(&self, other: &TransformerModel) -> bool {
        let (a, b) = (self.params(), other.params());
        a.len() == b.len() && a.iter().zip(&b).all(|((ia, ta), (ib, tb))| ia == ib && ta.bit_eq(tb))
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}
