//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward pass. Parameters are read in place from the
//! [`ParamStore`] the tape borrows; their gradients come back as a
//! [`Gradients`] set that the caller folds into the store.

use rand::Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, MatRef, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Reduction applied by [`Tape::cross_entropy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Attention pattern for one sequence packed at `offset..offset + len` of a
/// batch. `allowed[i * len + j]` permits query `i` to read key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    pub offset: usize,
    pub len: usize,
    pub allowed: Vec<bool>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Tanh {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<BlockMask>,
        probs: Vec<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<f64>,
        factor: f64,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, var: Var) -> &Tensor {
        let node = &self.nodes[var.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without a value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, var: Var) -> Result<(usize, usize)> {
        self.value(var).dims2()
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a [m,k] x b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        contract!(k == k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a [m,k] x b^T` where `b` is stored as `[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        contract!(k == k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::t(self.value(b).data(), n, k),
            &mut out,
            0.0,
        );
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMulNt { a, b },
            &[a, b],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        contract!(
            va.shape() == vb.shape(),
            "add shapes {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(x)?;
        let vb = self.value(bias);
        contract!(
            vb.len() == n,
            "bias of length {} for {} columns",
            vb.len(),
            n
        );
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        contract!(
            va.shape() == vb.shape(),
            "mul shapes {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(out, Op::Tanh { x }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.push(out, Op::Gelu { x }, &[x])
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .zip(&keep)
            .for_each(|(v, k)| *v *= k);
        self.push(out, Op::Dropout { x, keep }, &[x])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let (vg, vb) = (self.value(gamma), self.value(beta));
        contract!(
            vg.len() == n && vb.len() == n,
            "layer_norm affine params must have length {n}"
        );
        let vx = self.value(x);
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                normed[i * n + j] = h;
                out[i * n + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Looks up rows of `table [V,d]` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (rows, d) = self.dims2(table)?;
        let vt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            contract!(
                (id as usize) < rows,
                "embedding id {id} out of range for {rows} rows"
            );
            out.extend_from_slice(vt.row(id as usize));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let vx = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            contract!(r < m, "row {r} out of range for {m} rows");
            out.extend_from_slice(vx.row(r));
        }
        let out = Tensor::new(vec![rows.len(), n], out)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N, d]` with `d` split evenly across `heads`. Each
    /// block only attends within itself, and only along allowed edges;
    /// disallowed edges get exactly zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: &[BlockMask],
    ) -> Result<Var> {
        let (rows, d) = self.dims2(q)?;
        contract!(
            self.dims2(k)? == (rows, d) && self.dims2(v)? == (rows, d),
            "q/k/v shapes differ"
        );
        contract!(
            heads > 0 && d % heads == 0,
            "hidden size {d} not divisible by {heads} heads"
        );
        let covered: usize = blocks.iter().map(|b| b.len).sum();
        contract!(
            covered == rows,
            "blocks cover {covered} rows, tensor has {rows}"
        );
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (vq, vk, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; rows * d];
        let mut all_probs = Vec::with_capacity(blocks.len());
        for block in blocks {
            let n = block.len;
            contract!(block.allowed.len() == n * n, "block mask is not {n}x{n}");
            contract!(block.offset + n <= rows, "block exceeds tensor rows");
            let mut probs = vec![0.0; heads * n * n];
            let mut scores = vec![0.0; n];
            for h in 0..heads {
                let col = h * dh;
                for i in 0..n {
                    let qi = &vq[(block.offset + i) * d + col..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    let mut any = false;
                    for j in 0..n {
                        if block.allowed[i * n + j] {
                            let kj = &vk[(block.offset + j) * d + col..][..dh];
                            let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                            if !s.is_finite() {
                                return Err(Error::NumericDomain(format!(
                                    "attention score {s} at query {i}"
                                )));
                            }
                            scores[j] = s;
                            max = max.max(s);
                            any = true;
                        }
                    }
                    contract!(any, "query {i} has no allowed keys");
                    let p = &mut probs[(h * n + i) * n..][..n];
                    let mut total = 0.0;
                    for j in 0..n {
                        if block.allowed[i * n + j] {
                            p[j] = (scores[j] - max).exp();
                            total += p[j];
                        }
                    }
                    let oi = &mut out[(block.offset + i) * d + col..][..dh];
                    for j in 0..n {
                        if block.allowed[i * n + j] {
                            p[j] /= total;
                            let vj = &vv[(block.offset + j) * d + col..][..dh];
                            for (o, x) in oi.iter_mut().zip(vj) {
                                *o += p[j] * x;
                            }
                        }
                    }
                }
            }
            all_probs.push(probs);
        }
        let out = Tensor::new(vec![rows, d], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            blocks: blocks.to_vec(),
            probs: all_probs,
        };
        Ok(self.push(out, op, &[q, k, v]))
    }

    /// Softmax cross-entropy of `logits [m,V]` against `targets`, reduced to a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        reduction: Reduction,
    ) -> Result<Var> {
        let (m, vocab) = self.dims2(logits)?;
        contract!(
            targets.len() == m,
            "{} targets for {} logit rows",
            targets.len(),
            m
        );
        let vl = self.value(logits);
        if !vl.is_finite() {
            return Err(Error::NumericDomain("non-finite logits".into()));
        }
        let factor = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean if m > 0 => 1.0 / m as f64,
            Reduction::Mean => 0.0,
        };
        let mut probs = vec![0.0; m * vocab];
        let mut loss = 0.0;
        for i in 0..m {
            let t = targets[i] as usize;
            contract!(t < vocab, "target {t} outside vocabulary of {vocab}");
            let row = vl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[i * vocab..(i + 1) * vocab];
            let mut total = 0.0;
            for (pj, &l) in p.iter_mut().zip(row) {
                *pj = (l - max).exp();
                total += *pj;
            }
            p.iter_mut().for_each(|v| *v /= total);
            loss -= row[t] - max - total.ln();
        }
        let out = Tensor::scalar(loss * factor);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            factor,
        };
        Ok(self.push(out, op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    /// Backpropagates from a scalar `loss`, returning parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        contract!(
            lv.len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            lv.shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::with_len(self.store.len());
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, idx, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        node: &Node,
        idx: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let own = self.value(Var(idx));
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.add(*id, g),
            Op::MatMul { a, b } => {
                let (m, k) = self.dims2(*a)?;
                let (_, n) = self.dims2(*b)?;
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        MatRef::new(g.data(), m, n),
                        MatRef::t(self.value(*b).data(), k, n),
                        &mut ga,
                        0.0,
                    );
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        MatRef::t(self.value(*a).data(), m, k),
                        MatRef::new(g.data(), m, n),
                        &mut gb,
                        0.0,
                    );
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.dims2(*a)?;
                let (n, _) = self.dims2(*b)?;
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        MatRef::new(g.data(), m, n),
                        MatRef::new(self.value(*b).data(), n, k),
                        &mut ga,
                        0.0,
                    );
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; n * k];
                    gemm(
                        MatRef::t(g.data(), m, n),
                        MatRef::new(self.value(*a).data(), m, k),
                        &mut gb,
                        0.0,
                    );
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], gb)?);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::AddBias { x, bias } => {
                if self.nodes[bias.0].needs_grad {
                    let n = self.value(*bias).len();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, gb)?);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let mut ga = g.clone();
                    ga.data_mut()
                        .iter_mut()
                        .zip(self.value(*b).data())
                        .for_each(|(x, y)| *x *= y);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = g;
                    gb.data_mut()
                        .iter_mut()
                        .zip(self.value(*a).data())
                        .for_each(|(x, y)| *x *= y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale { x, factor } => {
                let mut gx = g;
                gx.data_mut().iter_mut().for_each(|v| *v *= factor);
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh { x } => {
                let mut gx = g;
                gx.data_mut()
                    .iter_mut()
                    .zip(own.data())
                    .for_each(|(v, t)| *v *= 1.0 - t * t);
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu { x } => {
                let mut gx = g;
                gx.data_mut()
                    .iter_mut()
                    .zip(self.value(*x).data())
                    .for_each(|(v, xi)| *v *= gelu_grad(*xi));
                self.accumulate(grads, *x, gx);
            }
            Op::Dropout { x, keep } => {
                let mut gx = g;
                gx.data_mut()
                    .iter_mut()
                    .zip(keep)
                    .for_each(|(v, k)| *v *= k);
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let (m, n) = self.dims2(*x)?;
                let vg = self.value(*gamma).data();
                if self.nodes[gamma.0].needs_grad || self.nodes[beta.0].needs_grad {
                    let mut gg = vec![0.0; n];
                    let mut gbeta = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            let dy = g.data()[i * n + j];
                            gg[j] += dy * normed[i * n + j];
                            gbeta[j] += dy;
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(gshape, gg)?);
                    self.accumulate(grads, *beta, Tensor::new(bshape, gbeta)?);
                }
                if self.nodes[x.0].needs_grad {
                    let mut gx = vec![0.0; m * n];
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            dxhat[j] = g.data()[i * n + j] * vg[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * normed[i * n + j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for j in 0..n {
                            gx[i * n + j] =
                                inv_std[i] * (dxhat[j] - mean_d - normed[i * n + j] * mean_dh);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![m, n], gx)?);
                }
            }
            Op::Embedding { table, ids } => {
                let mut gt = Tensor::zeros(self.value(*table).shape());
                for (i, &id) in ids.iter().enumerate() {
                    let src = g.row(i);
                    gt.row_mut(id as usize)
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *table, gt);
            }
            Op::GatherRows { x, rows } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (i, &r) in rows.iter().enumerate() {
                    let src = g.row(i);
                    gx.row_mut(r).iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            } => {
                let (rows, d) = self.dims2(*q)?;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (vq, vk, vv) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let go = g.data();
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                let mut gv = vec![0.0; rows * d];
                for (block, bprobs) in blocks.iter().zip(probs) {
                    let n = block.len;
                    let off = block.offset;
                    let mut dp = vec![0.0; n];
                    for h in 0..*heads {
                        let col = h * dh;
                        for i in 0..n {
                            let p = &bprobs[(h * n + i) * n..][..n];
                            let goi = &go[(off + i) * d + col..][..dh];
                            let mut dot = 0.0;
                            for j in 0..n {
                                if block.allowed[i * n + j] {
                                    let vj = &vv[(off + j) * d + col..][..dh];
                                    dp[j] = goi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                    dot += p[j] * dp[j];
                                    let gvj = &mut gv[(off + j) * d + col..][..dh];
                                    gvj.iter_mut().zip(goi).for_each(|(a, b)| *a += p[j] * b);
                                }
                            }
                            for j in 0..n {
                                if block.allowed[i * n + j] {
                                    let ds = p[j] * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    for c in 0..dh {
                                        gq[(off + i) * d + col + c] +=
                                            ds * vk[(off + j) * d + col + c];
                                        gk[(off + j) * d + col + c] +=
                                            ds * vq[(off + i) * d + col + c];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::new(vec![rows, d], gq)?);
                self.accumulate(grads, *k, Tensor::new(vec![rows, d], gk)?);
                self.accumulate(grads, *v, Tensor::new(vec![rows, d], gv)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                factor,
            } => {
                let (m, vocab) = self.dims2(*logits)?;
                let upstream = g.data()[0] * factor;
                let mut gl = probs.clone();
                for i in 0..m {
                    gl[i * vocab + targets[i] as usize] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= upstream);
                self.accumulate(grads, *logits, Tensor::new(vec![m, vocab], gl)?);
            }
            Op::Sum { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::filled(&shape, g.data()[0]));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::gradcheck::check_gradients;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn assert_gradcheck<F>(store: &mut ParamStore, build: F)
    where
        F: Fn(&mut Tape) -> Result<Var>,
    {
        let grads = {
            let mut tape = Tape::new(store);
            let loss = build(&mut tape).unwrap();
            tape.backward(loss).unwrap()
        };
        let report = check_gradients(store, &grads, 1e-5, None, |s| {
            let mut tape = Tape::new(s);
            let loss = build(&mut tape)?;
            tape.value(loss).item()
        })
        .unwrap();
        assert!(report.checked > 0);
        assert!(
            report.max_relative_error() < 1e-4,
            "worst: {:?}",
            report.worst
        );
    }

    #[test]
    fn quadratic_gradient() {
        let mut store = ParamStore::default();
        let w = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new(&store);
        let wv = tape.param(w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_yields_no_gradient() {
        let mut store = ParamStore::default();
        let w = store.add("w", Tensor::zeros(&[3]));
        let mut tape = Tape::new(&store);
        let _unused = tape.param(w);
        let c = tape.leaf(Tensor::new(vec![2], vec![1.0, 5.0]).unwrap());
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        store.accumulate(&grads).unwrap();
        assert!(store.get(w).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::default();
        let w = store.add("w", Tensor::zeros(&[3]));
        let mut tape = Tape::new(&store);
        let wv = tape.param(w);
        let y = tape.scale(wv, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::default();
        let w = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let grads = {
            let mut tape = Tape::new(&store);
            let wv = tape.param(w);
            let sq = tape.mul(wv, wv).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap()
        };
        store.accumulate(&grads).unwrap();
        store.accumulate(&grads).unwrap();
        assert_eq!(store.get(w).grad.data(), &[4.0, 8.0]);
    }

    #[test]
    fn mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::default();
        let dims = [5, 7, 6, 3];
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let wt = store.add(format!("l{i}.weight"), random(&mut rng, &[w[0], w[1]]));
            let b = store.add(format!("l{i}.bias"), random(&mut rng, &[w[1]]));
            layers.push((wt, b));
        }
        let x = random(&mut rng, &[4, 5]);
        assert_gradcheck(&mut store, |tape| {
            let mut h = tape.leaf(x.clone());
            for (i, &(w, b)) in layers.iter().enumerate() {
                let wv = tape.param(w);
                let bv = tape.param(b);
                h = tape.matmul(h, wv)?;
                h = tape.add_bias(h, bv)?;
                if i + 1 < layers.len() {
                    h = tape.tanh(h);
                }
            }
            let sq = tape.mul(h, h)?;
            Ok(tape.sum(sq))
        });
    }

    #[test]
    fn layer_norm_gelu_and_matmul_nt_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::default();
        let x = store.add("x", random(&mut rng, &[3, 6]));
        let g = store.add("norm.gamma", random(&mut rng, &[6]));
        let b = store.add("norm.beta", random(&mut rng, &[6]));
        let w = store.add("w", random(&mut rng, &[4, 6]));
        let mix = random(&mut rng, &[3, 4]);
        assert_gradcheck(&mut store, |tape| {
            let (xv, gv, bv, wv) = (tape.param(x), tape.param(g), tape.param(b), tape.param(w));
            let n = tape.layer_norm(xv, gv, bv, 1e-12)?;
            let a = tape.gelu(n);
            let logits = tape.matmul_nt(a, wv)?;
            let m = tape.leaf(mix.clone());
            let prod = tape.mul(logits, m)?;
            let s = tape.sum(prod);
            Ok(tape.scale(s, 0.7))
        });
    }

    #[test]
    fn embedding_gather_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        let table = store.add("table", random(&mut rng, &[5, 4]));
        let ids = [3u32, 1, 3, 0];
        for reduction in [Reduction::Sum, Reduction::Mean] {
            assert_gradcheck(&mut store, |tape| {
                let t = tape.param(table);
                let e = tape.embedding(t, &ids)?;
                let rows = tape.gather_rows(e, &[0, 2, 3])?;
                let logits = tape.matmul_nt(rows, t)?;
                tape.cross_entropy(logits, &[1, 4, 0], reduction)
            });
        }
    }

    #[test]
    fn masked_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::default();
        let q = store.add("q", random(&mut rng, &[7, 4]));
        let k = store.add("k", random(&mut rng, &[7, 4]));
        let v = store.add("v", random(&mut rng, &[7, 4]));
        let prefix = |n: usize, src: usize| -> Vec<bool> {
            (0..n * n).map(|c| c % n < (c / n + 1).max(src)).collect()
        };
        let blocks = vec![
            BlockMask {
                offset: 0,
                len: 4,
                allowed: prefix(4, 2),
            },
            BlockMask {
                offset: 4,
                len: 3,
                allowed: prefix(3, 1),
            },
        ];
        let weights = random(&mut rng, &[7, 4]);
        assert_gradcheck(&mut store, |tape| {
            let (qv, kv, vv) = (tape.param(q), tape.param(k), tape.param(v));
            let out = tape.attention(qv, kv, vv, 2, &blocks)?;
            let w = tape.leaf(weights.clone());
            let prod = tape.mul(out, w)?;
            Ok(tape.sum(prod))
        });
    }

    #[test]
    fn dropout_gradient_uses_the_sampled_mask() {
        let mut store = ParamStore::default();
        let x = store.add(
            "x",
            Tensor::new(vec![1, 8], (1..=8).map(f64::from).collect()).unwrap(),
        );
        let mut tape = Tape::new(&store);
        let xv = tape.param(x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = tape.dropout(xv, 0.5, &mut rng);
        let out = tape.value(y).clone();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        for (i, (&o, &g)) in out
            .data()
            .iter()
            .zip(grads.get(x).unwrap().data())
            .enumerate()
        {
            if o == 0.0 {
                assert_eq!(g, 0.0);
            } else {
                assert_eq!(g, 2.0);
                assert_eq!(o, 2.0 * (i + 1) as f64);
            }
        }
    }
}
