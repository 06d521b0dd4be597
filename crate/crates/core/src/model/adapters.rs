use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BlockParam, ParamId, TransformerModel};
use crate::error::{ensure, Result};
use crate::numerics::{LowRankAdapter, Tensor};

/// Projection matrices that can carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
        Projection::FfnUp,
        Projection::FfnDown,
    ];

    pub fn param(self) -> BlockParam {
        match self {
            Projection::Query => BlockParam::Wq,
            Projection::Key => BlockParam::Wk,
            Projection::Value => BlockParam::Wv,
            Projection::Output => BlockParam::Wo,
            Projection::FfnUp => BlockParam::W1,
            Projection::FfnDown => BlockParam::W2,
        }
    }

    pub fn from_param(p: BlockParam) -> Option<Self> {
        Projection::ALL.into_iter().find(|proj| proj.param() == p)
    }
}

/// One low-rank adapter per projection matrix of every block.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    adapters: BTreeMap<(usize, Projection), LowRankAdapter>,
}

impl AdapterSet {
    /// Attaches rank-`rank` adapters with scale `alpha / rank` to all
    /// attention and feed-forward projections of `model`.
    pub fn attach(model: &TransformerModel, rank: usize, alpha: f32, seed: u64) -> Result<Self> {
        ensure!(rank >= 1, "adapter rank must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = alpha / rank as f32;
        let mut adapters = BTreeMap::new();
        for (i, block) in model.blocks.iter().enumerate() {
            for proj in Projection::ALL {
                let base = block.get(proj.param()).clone();
                adapters.insert((i, proj), LowRankAdapter::new(base, rank, scale, &mut rng)?);
            }
        }
        Ok(Self { adapters })
    }

    pub fn get(&self, block: usize, proj: Projection) -> Option<&LowRankAdapter> {
        self.adapters.get(&(block, proj))
    }

    pub fn get_mut(&mut self, block: usize, proj: Projection) -> Option<&mut LowRankAdapter> {
        self.adapters.get_mut(&(block, proj))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, Projection), &LowRankAdapter)> {
        self.adapters.iter()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Trainable factor tensors in a fixed order: `down` then `up` for each
    /// adapter in key order.
    pub fn factors_mut(&mut self) -> Vec<&mut Tensor> {
        self.adapters
            .values_mut()
            .flat_map(|a| [&mut a.down, &mut a.up])
            .collect()
    }

    pub fn factors(&self) -> Vec<&Tensor> {
        self.adapters.values().flat_map(|a| [&a.down, &a.up]).collect()
    }

    /// Folds every adapter into `model`'s weights and zeroes the adapters.
    pub fn merge_into(&mut self, model: &mut TransformerModel) -> Result<()> {
        for (&(i, proj), adapter) in self.adapters.iter_mut() {
            ensure!(i < model.blocks.len(), "adapter for block {i} but model has {}", model.blocks.len());
            let merged = adapter.merge();
            *model.param_mut(ParamId::Block(i, proj.param())) = merged;
        }
        Ok(())
    }
}
