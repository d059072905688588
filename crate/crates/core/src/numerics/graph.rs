//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably and records every op as a
//! node. Parameters enter as leaves that read straight from the store, so
//! large embedding tables are never copied; lookups into them produce
//! row-sparse gradients. [`Graph::backward`] walks the tape once in reverse
//! and returns the [`Gradients`] of a scalar node.
//!
//! Binary elementwise ops broadcast their second operand into the first
//! (right-aligned, size-1 dims repeat); the output always has the shape of
//! the first operand.

use super::kernels::{broadcast_map, broadcastable, gemm, sigmoid, softplus};
use super::params::{GradBuf, Gradients, ParamId, ParamStore};
use super::Tensor;
#[cfg(test)]
use super::{finite_diff_check, normal_sample, Rng};
use crate::error::{arg_err, Error, Result};
use std::collections::BTreeMap;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Sigmoid(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Recip(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    RowNorm(Var),
    Gather {
        table: ParamId,
        ids: Vec<usize>,
    },
    IndexSelect {
        x: Var,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

/// `[outer, axis, inner]` factorisation of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn binary_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if !broadcastable(self.shape(a), self.shape(b)) {
            return arg_err(format!(
                "{what}: {:?} does not broadcast into {:?}",
                self.shape(b),
                self.shape(a)
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = match broadcast_map(av.shape(), bv.shape()) {
            None => av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Some(map) => av
                .data()
                .iter()
                .zip(map)
                .map(|(&x, j)| f(x, bv.data()[j]))
                .collect(),
        };
        Tensor::new(av.shape().to_vec(), data).expect("binary shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "add")?;
        let out = self.binary(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "sub")?;
        let out = self.binary(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "mul")?;
        let out = self.binary(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    /// Matrix product of the last two dims. `a` may carry leading batch dims;
    /// `b` is either a plain matrix shared across the batch or has the same
    /// batch dims. `ta`/`tb` transpose the respective operand.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return arg_err(format!("matmul needs matrices, got {sa:?} and {sb:?}"));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return arg_err(format!("matmul inner dims differ: {sa:?} x {sb:?}"));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        if !batch_b.is_empty() && batch_a != batch_b {
            return arg_err(format!("matmul batch dims differ: {sa:?} x {sb:?}"));
        }
        let batch: usize = batch_a.iter().product();
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if batch_b.is_empty() && !ta {
            gemm(av, false, bv, tb, &mut out, batch * m, k, n, false);
        } else {
            let b_stride = if batch_b.is_empty() { 0 } else { k * n };
            for i in 0..batch {
                gemm(
                    &av[i * m * k..(i + 1) * m * k],
                    ta,
                    &bv[i * b_stride..i * b_stride + k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                );
            }
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ` over the last two dims.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let d = out.last_dim();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    /// Layer normalisation over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return arg_err("layer_norm affine params must be [d]");
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, row) in xv.rows().enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for (j, v) in row.iter().enumerate() {
                xhat[r * d + j] = (v - mean) * inv;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| g[i % d] * h + b[i % d])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Sums out `axis` (the dimension is removed).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return arg_err(format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] += src[base + j];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::Argument(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Euclidean norm of every row over the last dimension.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let norms: Vec<f64> = v
            .rows()
            .map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        let shape = v.shape()[..v.rank().saturating_sub(1)].to_vec();
        let t = Tensor::new(shape, norms).expect("row_norm shape");
        self.push(t, Op::RowNorm(x))
    }

    /// Embedding lookup: rows `ids` of a `[rows, width]` parameter table.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let tv = self.store.value(table);
        if tv.rank() != 2 {
            return arg_err("gather needs a rank-2 table");
        }
        let (rows, width) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return arg_err(format!("row {id} out of range for table of {rows}"));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), width], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Selects entries of the first axis.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let n = v.shape()[0];
        let inner = v.numel() / n.max(1);
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= n {
                return arg_err(format!("index {i} out of range {n}"));
            }
            out.extend_from_slice(&v.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::IndexSelect {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::Argument("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return arg_err("concat axis out of range");
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_elsewhere = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_elsewhere {
                return arg_err(format!("concat shape mismatch {s:?} vs {first:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `start..start + len` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return arg_err(format!("narrow {start}+{len} on axis {axis} of {shape:?}"));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::Narrow { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Mean binary cross-entropy of `labels` under `sigmoid(logits)`,
    /// evaluated in logit space.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != labels.len() || labels.is_empty() {
            return arg_err(format!(
                "bce: {} logits vs {} labels",
                z.numel(),
                labels.len()
            ));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        let t = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            t,
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return arg_err(format!("backward needs a scalar, got {:?}", lv.shape()));
        }
        lv.ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out_val = node.value.as_ref();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => accumulate_param(&mut out, *id, g),
                Op::Add(a, b) => {
                    let gb = self.reduce_to(&g, self.shape(*b));
                    add_grad(&mut grads, *a, g);
                    add_grad(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    let gb = self.reduce_to(&g, self.shape(*b)).scale(-1.0);
                    add_grad(&mut grads, *a, g);
                    add_grad(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let map = broadcast_map(av.shape(), bv.shape());
                    let bidx = |k: usize| map.as_ref().map_or(k, |m| m[k]);
                    let ga: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, gk)| gk * bv.data()[bidx(k)])
                        .collect();
                    let mut gb = vec![0.0; bv.numel()];
                    for (k, gk) in g.data().iter().enumerate() {
                        gb[bidx(k)] += gk * av.data()[k];
                    }
                    add_grad(&mut grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                    add_grad(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
                Op::Scale(a, c) => add_grad(&mut grads, *a, g.scale(*c)),
                Op::MatMul { a, b, ta, tb } => {
                    let (ga, gb) = self.matmul_backward(*a, *b, *ta, *tb, &g)?;
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *b, gb);
                }
                Op::Sigmoid(a) => {
                    let y = out_val.unwrap();
                    let ga = g.zip_map(y, |gk, s| gk * s * (1.0 - s))?;
                    add_grad(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let ga = g.zip_map(self.value(*a), |gk, x| {
                        let s = sigmoid(x);
                        gk * (s + x * s * (1.0 - s))
                    })?;
                    add_grad(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(out_val.unwrap(), |gk, y| gk * (1.0 - y * y))?;
                    add_grad(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(out_val.unwrap(), |gk, y| gk * y)?;
                    add_grad(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = g.zip_map(self.value(*a), |gk, x| gk / x)?;
                    add_grad(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |gk, x| 2.0 * gk * x)?;
                    add_grad(&mut grads, *a, ga);
                }
                Op::Recip(a) => {
                    let ga = g.zip_map(out_val.unwrap(), |gk, y| -gk * y * y)?;
                    add_grad(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = out_val.unwrap();
                    let d = y.last_dim();
                    let mut ga = vec![0.0; y.numel()];
                    for (r, (yr, gr)) in y.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            ga[r * d + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    add_grad(&mut grads, *a, Tensor::new(y.shape().to_vec(), ga)?);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = self.value(*x).last_dim();
                    let gv = self.value(*gamma).data();
                    let mut gx = vec![0.0; xhat.len()];
                    let mut ggamma = vec![0.0; d];
                    let mut gbeta = vec![0.0; d];
                    for (r, gr) in g.data().chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                            ggamma[j] += gr[j] * xh[j];
                            gbeta[j] += gr[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            gx[r * d + j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    add_grad(&mut grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
                    add_grad(&mut grads, *gamma, Tensor::vector(ggamma));
                    add_grad(&mut grads, *beta, Tensor::vector(gbeta));
                }
                Op::SumAll(a) => {
                    let ga = Tensor::full(self.shape(*a), g.item());
                    add_grad(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let n = self.value(*a).numel() as f64;
                    let ga = Tensor::full(self.shape(*a), g.item() / n);
                    add_grad(&mut grads, *a, ga);
                }
                Op::SumAxis { x, axis } => {
                    let shape = self.shape(*x).to_vec();
                    let (outer, n, inner) = split_at_axis(&shape, *axis);
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for i in 0..n {
                            let base = (o * n + i) * inner;
                            gx[base..base + inner]
                                .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                        }
                    }
                    add_grad(&mut grads, *x, Tensor::new(shape, gx)?);
                }
                Op::RowNorm(x) => {
                    let xv = self.value(*x);
                    let norms = out_val.unwrap().data();
                    let d = xv.last_dim();
                    let mut gx = vec![0.0; xv.numel()];
                    for (r, row) in xv.rows().enumerate() {
                        if norms[r] > 0.0 {
                            let s = g.data()[r] / norms[r];
                            for j in 0..d {
                                gx[r * d + j] = s * row[j];
                            }
                        }
                    }
                    add_grad(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                Op::Gather { table, ids } => {
                    let width = g.last_dim();
                    let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                    for (k, &id) in ids.iter().enumerate() {
                        let acc = rows.entry(id).or_insert_with(|| vec![0.0; width]);
                        for (a, v) in acc.iter_mut().zip(&g.data()[k * width..(k + 1) * width]) {
                            *a += v;
                        }
                    }
                    accumulate_param_buf(&mut out, *table, GradBuf::Rows { width, rows });
                }
                Op::IndexSelect { x, idx } => {
                    let shape = self.shape(*x).to_vec();
                    let inner = g.numel() / idx.len().max(1);
                    let mut gx = vec![0.0; shape.iter().product()];
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..inner {
                            gx[i * inner + j] += g.data()[k * inner + j];
                        }
                    }
                    add_grad(&mut grads, *x, Tensor::new(shape, gx)?);
                }
                Op::Concat { parts, axis } => {
                    let shape = g.shape().to_vec();
                    let (outer, total, inner) = split_at_axis(&shape, *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let ps = self.shape(p).to_vec();
                        let len = ps[*axis];
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        add_grad(&mut grads, p, Tensor::new(ps, gp)?);
                        offset += len;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let shape = self.shape(*x).to_vec();
                    let (outer, n, inner) = split_at_axis(&shape, *axis);
                    let len = g.shape()[*axis];
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        gx[base..base + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    add_grad(&mut grads, *x, Tensor::new(shape, gx)?);
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.shape(*x))?;
                    add_grad(&mut grads, *x, gx);
                }
                Op::BceWithLogits { logits, labels } => {
                    let z = self.value(*logits);
                    let n = labels.len() as f64;
                    let s = g.item() / n;
                    let gz: Vec<f64> = z
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&z, &y)| s * (sigmoid(z) - y))
                        .collect();
                    add_grad(&mut grads, *logits, Tensor::new(z.shape().to_vec(), gz)?);
                }
            }
        }
        Ok(out)
    }

    /// Sums a gradient of the first-operand shape down to a broadcast shape.
    fn reduce_to(&self, g: &Tensor, shape: &[usize]) -> Tensor {
        match broadcast_map(g.shape(), shape) {
            None => g.clone(),
            Some(map) => {
                let mut out = Tensor::zeros(shape);
                let data = out.data_mut();
                for (k, gk) in g.data().iter().enumerate() {
                    data[map[k]] += gk;
                }
                out
            }
        }
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        g: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let n = if tb { rb } else { cb };
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        let mut ga = vec![0.0; av.numel()];
        let mut gb = vec![0.0; bv.numel()];
        let b_stride = if shared_b { 0 } else { k * n };

        if shared_b && !ta {
            // a flattens to [(batch*m), k]
            let rows = batch * m;
            gemm(g.data(), false, bv.data(), !tb, &mut ga, rows, n, k, false);
            if tb {
                gemm(g.data(), true, av.data(), false, &mut gb, n, rows, k, false);
            } else {
                gemm(av.data(), true, g.data(), false, &mut gb, k, rows, n, false);
            }
        } else {
            for i in 0..batch {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                let ai = &av.data()[i * m * k..(i + 1) * m * k];
                let bi = &bv.data()[i * b_stride..i * b_stride + k * n];
                let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                if ta {
                    // stored [k, m]: op(b) · gᵀ
                    gemm(bi, tb, gi, true, ga_i, k, n, m, false);
                } else {
                    gemm(gi, false, bi, !tb, ga_i, m, n, k, false);
                }
                let gb_i = &mut gb[i * b_stride..i * b_stride + k * n];
                let acc = shared_b && i > 0;
                if tb {
                    // stored [n, k]: gᵀ · op(a)
                    gemm(gi, true, ai, ta, gb_i, n, m, k, acc);
                } else {
                    gemm(ai, !ta, gi, false, gb_i, k, m, n, acc);
                }
            }
        }
        Ok((Tensor::new(sa.to_vec(), ga)?, Tensor::new(sb.to_vec(), gb)?))
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_param(out: &mut Gradients, id: ParamId, g: Tensor) {
    accumulate_param_buf(out, id, GradBuf::Dense(g));
}

fn accumulate_param_buf(out: &mut Gradients, id: ParamId, g: GradBuf) {
    use std::collections::btree_map::Entry;
    match out.bufs.entry(id) {
        Entry::Vacant(e) => {
            e.insert(g);
        }
        Entry::Occupied(mut e) => {
            let merged = match (e.get_mut(), g) {
                (GradBuf::Dense(acc), GradBuf::Dense(t)) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                    None
                }
                (GradBuf::Rows { rows: acc, .. }, GradBuf::Rows { rows, .. }) => {
                    for (r, vals) in rows {
                        match acc.get_mut(&r) {
                            Some(dst) => dst.iter_mut().zip(&vals).for_each(|(a, b)| *a += b),
                            None => {
                                acc.insert(r, vals);
                            }
                        }
                    }
                    None
                }
                (GradBuf::Dense(acc), rows @ GradBuf::Rows { .. }) => {
                    let shape = acc.shape().to_vec();
                    let dense = rows.to_dense(&shape);
                    for (a, b) in acc.data_mut().iter_mut().zip(dense.data()) {
                        *a += b;
                    }
                    None
                }
                (rows @ GradBuf::Rows { .. }, GradBuf::Dense(t)) => {
                    let mut dense = rows.to_dense(t.shape());
                    for (a, b) in dense.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                    Some(dense)
                }
            };
            if let Some(d) = merged {
                e.insert(GradBuf::Dense(d));
            }
        }
    }
}

#[cfg(test)]
#[path = "graph_tests.rs"]
mod tests;
