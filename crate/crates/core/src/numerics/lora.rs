use rand::Rng;

use super::kernels;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{ensure, Result};

/// Frozen weight plus a trainable low-rank correction:
/// `effective = base + scale · (down · up)`.
///
/// `down` starts random and `up` starts at zero, so a fresh adapter leaves
/// the effective weight equal to `base`.
#[derive(Clone, Debug)]
pub struct LowRankAdapter {
    pub base: Tensor,
    pub down: Tensor,
    pub up: Tensor,
    pub rank: usize,
    pub scale: f32,
}

impl LowRankAdapter {
    pub fn new<R: Rng + ?Sized>(base: Tensor, rank: usize, scale: f32, rng: &mut R) -> Result<Self> {
        ensure!(base.rank() == 2, "adapter base must be a matrix, got {:?}", base.dims());
        let (m, n) = (base.dims()[0], base.dims()[1]);
        ensure!(
            rank >= 1 && rank <= m.min(n),
            "adapter rank {rank} outside 1..={}",
            m.min(n)
        );
        let down = Tensor::randn(&[m, rank], 1.0 / (m as f32).sqrt(), rng);
        let up = Tensor::zeros(&[rank, n]);
        Ok(Self {
            base,
            down,
            up,
            rank,
            scale,
        })
    }

    /// Builds an adapter from explicit factors.
    pub fn from_parts(base: Tensor, down: Tensor, up: Tensor, scale: f32) -> Result<Self> {
        ensure!(base.rank() == 2 && down.rank() == 2 && up.rank() == 2, "adapter parts must be matrices");
        let (m, n) = (base.dims()[0], base.dims()[1]);
        let rank = down.dims()[1];
        ensure!(
            down.dims()[0] == m && up.dims() == [rank, n],
            "adapter factors {:?} · {:?} do not match base {:?}",
            down.dims(),
            up.dims(),
            base.dims()
        );
        ensure!(rank <= m.min(n), "adapter rank {rank} exceeds min({m}, {n})");
        Ok(Self {
            base,
            down,
            up,
            rank,
            scale,
        })
    }

    pub fn effective_weight(&self) -> Tensor {
        let (m, n) = (self.base.dims()[0], self.base.dims()[1]);
        let delta = kernels::matmul(self.down.data(), self.up.data(), m, self.rank, n);
        let data = self
            .base
            .data()
            .iter()
            .zip(&delta)
            .map(|(&b, &d)| b + self.scale * d)
            .collect();
        Tensor::from_parts(vec![m, n], data)
    }

    /// Folds the correction into `base`, zeroes `up`, and returns the merged
    /// weight. Merging again returns the same weight.
    pub fn merge(&mut self) -> Tensor {
        let merged = self.effective_weight();
        self.base = merged.clone();
        self.up = Tensor::zeros(self.up.dims());
        merged
    }

    /// Records the effective weight on `tape` with `base` frozen and the
    /// factors trainable. Returns `(weight, down, up)`.
    pub fn bind(&self, tape: &mut Tape) -> Result<(Var, Var, Var)> {
        let base = tape.constant(self.base.clone());
        let down = tape.param(self.down.clone());
        let up = tape.param(self.up.clone());
        let delta = tape.matmul(down, up)?;
        let delta = tape.scale(delta, self.scale);
        let w = tape.add(base, delta)?;
        Ok((w, down, up))
    }
}
