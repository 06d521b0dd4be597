//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends one node holding its forward value and whatever
//! it needs for the backward rule. Because nodes can only reference earlier
//! nodes, walking the tape from the end is a valid reverse topological order.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchedMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f32,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Gelu {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        a: Var,
        heads: usize,
    },
    MergeHeads {
        a: Var,
        heads: usize,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Layer-norm variance floor.
pub const LAYERNORM_EPS: f32 = 1e-5;

/// Gradient tape. Build values with the op methods, then call
/// [`Tape::backward`] on a scalar.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a[.., k] · b[k, n]`, treating all leading axes of `a` as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.value(a).dims(), self.value(b).dims());
        let k = *ad.last().unwrap();
        if bd.len() != 2 || bd[0] != k {
            return Err(Error::Shape {
                op: "matmul",
                left: ad.to_vec(),
                right: bd.to_vec(),
            });
        }
        let n = bd[1];
        let m = self.value(a).numel() / k;
        let mut dims = ad.to_vec();
        *dims.last_mut().unwrap() = n;
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(dims, out), Op::MatMul { a, b }, rg))
    }

    /// Per-group product of `a[g, m, k]` with `b[g, k, n]`, or with
    /// `b[g, n, k]` transposed when `transpose_b` is set.
    pub fn batched_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ad, bd) = (self.value(a).dims(), self.value(b).dims());
        let shape_err = || Error::Shape {
            op: "batched_matmul",
            left: ad.to_vec(),
            right: bd.to_vec(),
        };
        if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] {
            return Err(shape_err());
        }
        let (g, m, k) = (ad[0], ad[1], ad[2]);
        let n = if transpose_b {
            if bd[2] != k {
                return Err(shape_err());
            }
            bd[1]
        } else {
            if bd[1] != k {
                return Err(shape_err());
            }
            bd[2]
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let a_g = &av[gi * m * k..(gi + 1) * m * k];
            let b_g = &bv[gi * k * n..(gi + 1) * k * n];
            let o_g = &mut out[gi * m * n..(gi + 1) * m * n];
            if transpose_b {
                kernels::matmul_nt_acc(o_g, a_g, b_g, m, k, n);
            } else {
                kernels::matmul_acc(o_g, a_g, b_g, m, k, n);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![g, m, n], out),
            Op::BatchedMatMul { a, b, transpose_b },
            rg,
        ))
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if !is_suffix(at.dims(), bt.dims()) {
            return Err(Error::Shape {
                op: if mul { "mul" } else { "add" },
                left: at.dims().to_vec(),
                right: bt.dims().to_vec(),
            });
        }
        let inner = bt.numel();
        let mut out = at.data().to_vec();
        for chunk in out.chunks_exact_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(bt.data()) {
                if mul {
                    *o *= v;
                } else {
                    *o += v;
                }
            }
        }
        let dims = at.dims().to_vec();
        let rg = self.rg(&[a, b]);
        let op = if mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        Ok(self.push(Tensor::from_parts(dims, out), op, rg))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, false)
    }

    /// Elementwise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, true)
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|v| v * factor).collect();
        let dims = t.dims().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(dims, out), Op::Scale { a, factor }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            kernels::softmax_row(row, n);
        }
        let dims = t.dims().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(dims, out), Op::Softmax { a }, rg)
    }

    /// Softmax over the last axis of `[.., seq, seq]` scores where query row
    /// `i` may only see keys `0..=i`. Masked probabilities are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = t.dims();
        if d.len() < 2 || d[d.len() - 1] != d[d.len() - 2] {
            return Err(Error::Shape {
                op: "causal_softmax",
                left: d.to_vec(),
                right: vec![],
            });
        }
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_exact_mut(n).enumerate() {
            kernels::softmax_row(row, r % n + 1);
        }
        let dims = d.to_vec();
        let rg = self.rg(&[a]);
        // Masked entries are zero so the plain softmax backward rule applies.
        Ok(self.push(Tensor::from_parts(dims, out), Op::Softmax { a }, rg))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xt = self.value(x);
        let n = xt.last_dim();
        for p in [gain, bias] {
            if self.value(p).dims() != [n] {
                return Err(Error::Shape {
                    op: "layernorm",
                    left: xt.dims().to_vec(),
                    right: self.value(p).dims().to_vec(),
                });
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xt.numel() / n;
        let mut xhat = Vec::with_capacity(xt.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xt.numel());
        for row in xt.data().chunks_exact(n) {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let dims = xt.dims().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(dims, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&v| kernels::gelu(v)).collect();
        let dims = t.dims().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(dims, out), Op::Gelu { a }, rg)
    }

    /// Gathers rows of `table[vocab, d]`; the result has dims `out_dims + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_dims: &[usize]) -> Result<Var> {
        let t = self.value(table);
        ensure!(t.rank() == 2, "embedding table must be rank 2, got {:?}", t.dims());
        ensure!(
            out_dims.iter().product::<usize>() == ids.len(),
            "embedding ids length {} does not fill {:?}",
            ids.len(),
            out_dims
        );
        let (vocab, d) = (t.dims()[0], t.dims()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::input(format!("token id {id} >= vocab size {vocab}")));
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let mut dims = out_dims.to_vec();
        dims.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(dims, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `[b, t, h·hd]` → `[b·h, t, hd]`
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let t = self.value(a);
        let d = t.dims();
        if d.len() != 3 || heads == 0 || d[2] % heads != 0 {
            return Err(Error::Shape {
                op: "split_heads",
                left: d.to_vec(),
                right: vec![heads],
            });
        }
        let (b, s, hd) = (d[0], d[1], d[2] / heads);
        let out = permute_heads(t.data(), b, s, heads, hd, true);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![b * heads, s, hd], out),
            Op::SplitHeads { a, heads },
            rg,
        ))
    }

    /// `[b·h, t, hd]` → `[b, t, h·hd]`
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let t = self.value(a);
        let d = t.dims();
        if d.len() != 3 || heads == 0 || d[0] % heads != 0 {
            return Err(Error::Shape {
                op: "merge_heads",
                left: d.to_vec(),
                right: vec![heads],
            });
        }
        let (b, s, hd) = (d[0] / heads, d[1], d[2]);
        let out = permute_heads(t.data(), b, s, heads, hd, false);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![b, s, heads * hd], out),
            Op::MergeHeads { a, heads },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(dims)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.dims() != bt.dims() {
            return Err(Error::Shape {
                op: "mse",
                left: at.dims().to_vec(),
                right: bt.dims().to_vec(),
            });
        }
        let s: f64 = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        let v = (s / at.numel() as f64) as f32;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Mse { a, b }, rg))
    }

    /// Mean next-token cross-entropy of `logits[.., vocab]` against one
    /// target id per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let v = t.last_dim();
        let rows = t.numel() / v;
        ensure!(
            targets.len() == rows,
            "cross_entropy: {} targets for {rows} rows",
            targets.len()
        );
        let mut probs = t.data().to_vec();
        let mut nll = 0.0f64;
        for (row, &tgt) in probs.chunks_exact_mut(v).zip(targets) {
            if tgt >= v {
                return Err(Error::input(format!("target id {tgt} >= vocab size {v}")));
            }
            kernels::softmax_row(row, v);
            nll -= (row[tgt].max(f32::MIN_POSITIVE) as f64).ln();
        }
        let value = (nll / rows as f64) as f32;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Back-propagates from the scalar `loss` to every leaf that requires a
    /// gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        ensure!(
            lt.is_scalar(),
            "backward needs a scalar loss, got dims {:?}",
            lt.dims()
        );
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::from_parts(node.value.dims().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut acc = |var: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            let n = self.nodes[var.0].value.numel();
            let slot = grads[var.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.last_dim();
                let n = bv.dims()[1];
                let m = av.numel() / k;
                acc(*a, &mut |da| kernels::matmul_nt_acc(da, g, bv.data(), m, n, k));
                acc(*b, &mut |db| kernels::matmul_tn_acc(db, av.data(), g, m, k, n));
            }
            Op::BatchedMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (groups, m, k) = (av.dims()[0], av.dims()[1], av.dims()[2]);
                let n = node.value.dims()[2];
                let (ad, bd) = (av.data(), bv.data());
                acc(*a, &mut |da| {
                    for gi in 0..groups {
                        let g_g = &g[gi * m * n..(gi + 1) * m * n];
                        let b_g = &bd[gi * k * n..(gi + 1) * k * n];
                        let da_g = &mut da[gi * m * k..(gi + 1) * m * k];
                        if *transpose_b {
                            kernels::matmul_acc(da_g, g_g, b_g, m, n, k);
                        } else {
                            kernels::matmul_nt_acc(da_g, g_g, b_g, m, n, k);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for gi in 0..groups {
                        let g_g = &g[gi * m * n..(gi + 1) * m * n];
                        let a_g = &ad[gi * m * k..(gi + 1) * m * k];
                        let db_g = &mut db[gi * k * n..(gi + 1) * k * n];
                        if *transpose_b {
                            kernels::matmul_tn_acc(db_g, g_g, a_g, m, n, k);
                        } else {
                            kernels::matmul_tn_acc(db_g, a_g, g_g, m, k, n);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |da| {
                    for (d, &v) in da.iter_mut().zip(g) {
                        *d += v;
                    }
                });
                acc(*b, &mut |db| {
                    let inner = db.len();
                    for chunk in g.chunks_exact(inner) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let inner = bv.len();
                acc(*a, &mut |da| {
                    for (dc, gc) in da.chunks_exact_mut(inner).zip(g.chunks_exact(inner)) {
                        for ((d, &gv), &bb) in dc.iter_mut().zip(gc).zip(bv) {
                            *d += gv * bb;
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for (ac, gc) in av.chunks_exact(inner).zip(g.chunks_exact(inner)) {
                        for ((d, &gv), &aa) in db.iter_mut().zip(gc).zip(ac) {
                            *d += gv * aa;
                        }
                    }
                });
            }
            Op::Scale { a, factor } => acc(*a, &mut |da| {
                for (d, &v) in da.iter_mut().zip(g) {
                    *d += factor * v;
                }
            }),
            Op::Softmax { a } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                acc(*a, &mut |da| {
                    for ((dr, yr), gr) in da
                        .chunks_exact_mut(n)
                        .zip(y.chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.last_dim();
                let gv = self.value(*gain).data();
                acc(*gain, &mut |dg| {
                    for (hr, gr) in xhat.chunks_exact(n).zip(g.chunks_exact(n)) {
                        for ((d, &h), &gg) in dg.iter_mut().zip(hr).zip(gr) {
                            *d += gg * h;
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for gr in g.chunks_exact(n) {
                        for (d, &gg) in db.iter_mut().zip(gr) {
                            *d += gg;
                        }
                    }
                });
                acc(*x, &mut |dx| {
                    let mut dxhat = vec![0.0f32; n];
                    for (((dr, hr), gr), &is) in dx
                        .chunks_exact_mut(n)
                        .zip(xhat.chunks_exact(n))
                        .zip(g.chunks_exact(n))
                        .zip(inv_std)
                    {
                        for ((dh, &gg), &w) in dxhat.iter_mut().zip(gr).zip(gv) {
                            *dh = gg * w;
                        }
                        let mean_dh = dxhat.iter().sum::<f32>() / n as f32;
                        let mean_dh_h =
                            dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f32>() / n as f32;
                        for ((d, &dh), &h) in dr.iter_mut().zip(&dxhat).zip(hr) {
                            *d += is * (dh - mean_dh - h * mean_dh_h);
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                acc(*a, &mut |da| {
                    for ((d, &x), &gv) in da.iter_mut().zip(av).zip(g) {
                        *d += gv * kernels::gelu_grad(x);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).dims()[1];
                acc(*table, &mut |dt| {
                    for (&id, gr) in ids.iter().zip(g.chunks_exact(d)) {
                        for (t, &gv) in dt[id * d..(id + 1) * d].iter_mut().zip(gr) {
                            *t += gv;
                        }
                    }
                });
            }
            Op::SplitHeads { a, heads } => {
                let ad = self.value(*a).dims();
                let (b, s, hd) = (ad[0], ad[1], ad[2] / heads);
                let back = permute_heads(g, b, s, *heads, hd, false);
                acc(*a, &mut |da| {
                    for (d, &v) in da.iter_mut().zip(&back) {
                        *d += v;
                    }
                });
            }
            Op::MergeHeads { a, heads } => {
                let ad = self.value(*a).dims();
                let (b, s, hd) = (ad[0] / heads, ad[1], ad[2]);
                let back = permute_heads(g, b, s, *heads, hd, true);
                acc(*a, &mut |da| {
                    for (d, &v) in da.iter_mut().zip(&back) {
                        *d += v;
                    }
                });
            }
            Op::Reshape { a } => acc(*a, &mut |da| {
                for (d, &v) in da.iter_mut().zip(g) {
                    *d += v;
                }
            }),
            Op::Sum { a } => acc(*a, &mut |da| {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * g[0] / av.len() as f32;
                acc(*a, &mut |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d += c * (x - y);
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d -= c * (x - y);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).last_dim();
                let c = g[0] / targets.len() as f32;
                acc(*logits, &mut |dl| {
                    for ((dr, pr), &t) in dl
                        .chunks_exact_mut(v)
                        .zip(probs.chunks_exact(v))
                        .zip(targets)
                    {
                        for (d, &p) in dr.iter_mut().zip(pr) {
                            *d += c * p;
                        }
                        dr[t] -= c;
                    }
                });
            }
        }
    }
}

/// Moves between `[b, t, h, hd]` and `[b, h, t, hd]` layouts.
fn permute_heads(x: &[f32], b: usize, s: usize, h: usize, hd: usize, split: bool) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ti in 0..s {
            for hi in 0..h {
                let merged = ((bi * s + ti) * h + hi) * hd;
                let split_at = ((bi * h + hi) * s + ti) * hd;
                let (src, dst) = if split {
                    (merged, split_at)
                } else {
                    (split_at, merged)
                };
                out[dst..dst + hd].copy_from_slice(&x[src..src + hd]);
            }
        }
    }
    out
}
