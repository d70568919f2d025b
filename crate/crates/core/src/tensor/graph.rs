//! Forward execution context. A `Graph` computes op results and, when a
//! tape is attached and an input participates in differentiation, appends
//! the op record needed for the backward pass.

use std::cell::Cell;

use rand::Rng;

use crate::error::{shape_str, Error, Result};
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;
use crate::tensor::ops;
use crate::tensor::tape::{slice_axis, Arg, MatmulDims, Op, Tape};
use crate::tensor::{element_count, IdMatrix, KeyMask, Tensor};

pub struct Graph<'t, S: Scalar> {
    tape: Option<&'t Tape<S>>,
    train: bool,
    seed: u64,
    step: u64,
    op_counter: Cell<u64>,
    debug_checks: bool,
}

impl<'t, S: Scalar> Graph<'t, S> {
    /// Evaluation context: nothing is recorded, dropout is a no-op.
    pub fn inference() -> Self {
        Graph {
            tape: None,
            train: false,
            seed: 0,
            step: 0,
            op_counter: Cell::new(0),
            debug_checks: false,
        }
    }

    /// Recording context for a backward-able forward pass.
    pub fn recording(tape: &'t Tape<S>) -> Self {
        Graph {
            tape: Some(tape),
            train: false,
            seed: 0,
            step: 0,
            op_counter: Cell::new(0),
            debug_checks: false,
        }
    }

    /// Enable train mode; dropout draws from the stream keyed by
    /// (seed, step, op index).
    pub fn train_mode(mut self, seed: u64, step: u64) -> Self {
        self.train = true;
        self.seed = seed;
        self.step = step;
        self
    }

    /// Scan every op output for NaN/Inf. Off by default.
    pub fn debug_checks(mut self, enabled: bool) -> Self {
        self.debug_checks = enabled;
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn arg(&self, t: &Tensor<S>) -> Arg<S> {
        let node = self.tape.and_then(|tape| {
            if t.node_on(tape.id).is_some() || t.requires_grad() {
                Some(tape.leaf(t))
            } else {
                None
            }
        });
        Arg {
            node,
            value: t.clone(),
        }
    }

    fn finish(&self, op_name: &'static str, op: Op<S>, out: Tensor<S>, tracked: bool) -> Result<Tensor<S>> {
        if self.debug_checks && !out.iter_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        if tracked {
            if let Some(tape) = self.tape {
                tape.record(op, &out);
            }
        }
        Ok(out)
    }

    /// Matrix product. Accepts `[.., m, k] x [k, n]` (the right operand is
    /// shared across all leading rows) and batched `[l.., m, k] x [l.., k, n]`.
    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (dims, out_shape) = matmul_dims(a.shape(), b.shape())?;
        let out = {
            let adata = a.data();
            let bdata = b.data();
            ops::matmul_nn(
                &adata,
                &bdata,
                dims.batch,
                dims.m,
                dims.k,
                dims.n,
                dims.broadcast_b,
            )
        };
        let (a, b) = (self.arg(a), self.arg(b));
        let tracked = a.node.is_some() || b.node.is_some();
        self.finish(
            "matmul",
            Op::Matmul { a, b, dims },
            Tensor::new_unchecked(out_shape, out),
            tracked,
        )
    }

    /// Elementwise add; `b` may be a suffix-shaped broadcast of `a`
    /// (e.g. `[B, T, D] + [D]` for a bias).
    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if !is_suffix(b.shape(), a.shape()) {
            return Err(Error::ShapeMismatch {
                op: "add",
                expected: format!("suffix of {}", shape_str(a.shape())),
                actual: shape_str(b.shape()),
            });
        }
        let out = ops::add_suffix_broadcast(&a.data(), &b.data());
        let shape = a.shape().to_vec();
        let (a, b) = (self.arg(a), self.arg(b));
        let tracked = a.node.is_some() || b.node.is_some();
        self.finish("add", Op::Add { a, b }, Tensor::new_unchecked(shape, out), tracked)
    }

    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                expected: shape_str(a.shape()),
                actual: shape_str(b.shape()),
            });
        }
        let out: Vec<S> = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x * *y).collect();
        let shape = a.shape().to_vec();
        let (a, b) = (self.arg(a), self.arg(b));
        let tracked = a.node.is_some() || b.node.is_some();
        self.finish("mul", Op::Mul { a, b }, Tensor::new_unchecked(shape, out), tracked)
    }

    pub fn scale(&self, a: &Tensor<S>, factor: S) -> Result<Tensor<S>> {
        let out: Vec<S> = a.data().iter().map(|x| *x * factor).collect();
        let shape = a.shape().to_vec();
        let a = self.arg(a);
        let tracked = a.node.is_some();
        self.finish(
            "scale",
            Op::Scale { a, factor },
            Tensor::new_unchecked(shape, out),
            tracked,
        )
    }

    pub fn permute(&self, a: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>> {
        let mut seen = vec![false; a.rank()];
        let valid = axes.len() == a.rank()
            && axes.iter().all(|&ax| {
                if ax >= a.rank() || seen[ax] {
                    false
                } else {
                    seen[ax] = true;
                    true
                }
            });
        if !valid {
            return Err(Error::ShapeMismatch {
                op: "permute",
                expected: format!("permutation of {} axes", a.rank()),
                actual: format!("{axes:?}"),
            });
        }
        let out = ops::permute(&a.data(), a.shape(), axes);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
        let a = self.arg(a);
        let tracked = a.node.is_some();
        self.finish(
            "permute",
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            Tensor::new_unchecked(out_shape, out),
            tracked,
        )
    }

    /// Swap the last two axes.
    pub fn transpose(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        if a.rank() < 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                expected: "rank >= 2".into(),
                actual: shape_str(a.shape()),
            });
        }
        let mut axes: Vec<usize> = (0..a.rank()).collect();
        axes.swap(a.rank() - 2, a.rank() - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&self, a: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>> {
        if element_count(shape) != a.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: format!("{} elements", a.len()),
                actual: format!("{} for {}", element_count(shape), shape_str(shape)),
            });
        }
        let out = a.to_vec();
        let a = self.arg(a);
        let tracked = a.node.is_some();
        self.finish(
            "reshape",
            Op::Reshape { a },
            Tensor::new_unchecked(shape.to_vec(), out),
            tracked,
        )
    }

    pub fn concat(&self, parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let mut out_shape = first.shape().to_vec();
        for p in &parts[1..] {
            if p.rank() != first.rank()
                || (0..first.rank()).any(|ax| ax != axis && p.shape()[ax] != first.shape()[ax])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    expected: shape_str(first.shape()),
                    actual: shape_str(p.shape()),
                });
            }
        }
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();

        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(element_count(&out_shape));
        for o in 0..outer {
            for p in parts {
                let extent = p.shape()[axis];
                let data = p.data();
                out.extend_from_slice(&data[o * extent * inner..(o + 1) * extent * inner]);
            }
        }

        let args: Vec<Arg<S>> = parts.iter().map(|p| self.arg(p)).collect();
        let tracked = args.iter().any(|a| a.node.is_some());
        self.finish(
            "concat",
            Op::Concat { parts: args, axis },
            Tensor::new_unchecked(out_shape, out),
            tracked,
        )
    }

    pub fn slice(&self, a: &Tensor<S>, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        if axis >= a.rank() || start + len > a.shape()[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                expected: format!("range within axis {axis} of {}", shape_str(a.shape())),
                actual: format!("{start}..{}", start + len),
            });
        }
        let out = slice_axis(&a.data(), a.shape(), axis, start, len);
        let mut out_shape = a.shape().to_vec();
        out_shape[axis] = len;
        let a = self.arg(a);
        let tracked = a.node.is_some();
        self.finish(
            "slice",
            Op::Slice { a, axis, start },
            Tensor::new_unchecked(out_shape, out),
            tracked,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        self.softmax_inner(a, None)
    }

    /// Softmax over the last axis with masked keys receiving exactly zero
    /// weight. The mask batches along the first axis of `a` (or is a single
    /// row for rank-2 inputs). Errors when any batch row has no valid key.
    pub fn masked_softmax(&self, a: &Tensor<S>, mask: &KeyMask) -> Result<Tensor<S>> {
        let key_len = *a.shape().last().unwrap();
        let lead_batch = if a.rank() >= 3 { a.shape()[0] } else { 1 };
        if mask.len != key_len || mask.batch != lead_batch {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                expected: format!("mask [{lead_batch}, {key_len}]"),
                actual: format!("mask [{}, {}]", mask.batch, mask.len),
            });
        }
        self.softmax_inner(a, Some(mask))
    }

    fn softmax_inner(&self, a: &Tensor<S>, mask: Option<&KeyMask>) -> Result<Tensor<S>> {
        if a.rank() < 1 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                expected: "rank >= 1".into(),
                actual: shape_str(a.shape()),
            });
        }
        let row_len = *a.shape().last().unwrap();
        let rows = a.len() / row_len;
        let out = match mask {
            None => ops::softmax_rows(&a.data(), row_len, None),
            Some(m) => {
                let rows_per_batch = rows / m.batch;
                ops::softmax_rows(&a.data(), row_len, Some((m.flags(), rows_per_batch)))
            }
        }
        .map_err(|batch_row| Error::DegenerateAttention { batch_row })?;
        let y = Tensor::new_unchecked(a.shape().to_vec(), out);
        let a = self.arg(a);
        let tracked = a.node.is_some();
        self.finish("softmax", Op::Softmax { a, y: y.clone() }, y, tracked)
    }

    /// Layer normalization over the last axis: `gamma * (x - mu) / sigma + beta`.
    pub fn layer_norm(
        &self,
        x: &Tensor<S>,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
        eps: S,
    ) -> Result<Tensor<S>> {
        let dim = *x.shape().last().unwrap();
        if gamma.shape() != [dim] || beta.shape() != [dim] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                expected: format!("gamma/beta [{dim}]"),
                actual: format!("{} / {}", shape_str(gamma.shape()), shape_str(beta.shape())),
            });
        }
        let rows = x.len() / dim;
        let dim_s = S::from_f64_lossy(dim as f64);
        let mut out = vec![S::zero(); x.len()];
        let mut xhat = vec![S::zero(); x.len()];
        let mut inv_std = vec![S::zero(); rows];
        {
            let xdata = x.data();
            let gdata = gamma.data();
            let bdata = beta.data();
            for r in 0..rows {
                let lo = r * dim;
                let row = &xdata[lo..lo + dim];
                let mut mean = S::zero();
                for v in row {
                    mean += *v;
                }
                mean /= dim_s;
                let mut var = S::zero();
                for v in row {
                    let d = *v - mean;
                    var += d * d;
                }
                var /= dim_s;
                let istd = S::one() / (var + eps).sqrt();
                inv_std[r] = istd;
                for j in 0..dim {
                    let h = (row[j] - mean) * istd;
                    xhat[lo + j] = h;
                    out[lo + j] = gdata[j] * h + bdata[j];
                }
            }
        }
        let shape = x.shape().to_vec();
        let (x, gamma, beta) = (self.arg(x), self.arg(gamma), self.arg(beta));
        let tracked = x.node.is_some() || gamma.node.is_some() || beta.node.is_some();
        self.finish(
            "layer_norm",
            Op::LayerNorm {
                x,
                gamma,
                xhat,
                inv_std,
                beta_node: beta.node,
            },
            Tensor::new_unchecked(shape, out),
            tracked,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let out: Vec<S> = x.data().iter().map(|v| ops::gelu_value(*v)).collect();
        let shape = x.shape().to_vec();
        let x = self.arg(x);
        let tracked = x.node.is_some();
        self.finish("gelu", Op::Gelu { x }, Tensor::new_unchecked(shape, out), tracked)
    }

    pub fn tanh(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let out: Vec<S> = x.data().iter().map(|v| v.tanh()).collect();
        let y = Tensor::new_unchecked(x.shape().to_vec(), out);
        let x = self.arg(x);
        let tracked = x.node.is_some();
        self.finish("tanh", Op::Tanh { x, y: y.clone() }, y, tracked)
    }

    /// Row lookup: `table[ids]` -> `[batch, len, dim]`.
    pub fn embedding(&self, table: &Tensor<S>, ids: &IdMatrix) -> Result<Tensor<S>> {
        if table.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                expected: "rank-2 table".into(),
                actual: shape_str(table.shape()),
            });
        }
        let vocab = table.shape()[0];
        let dim = table.shape()[1];
        for id in &ids.data {
            if *id as usize >= vocab {
                return Err(Error::TokenOutOfRange { id: *id, vocab });
            }
        }
        let mut out = Vec::with_capacity(ids.data.len() * dim);
        {
            let tdata = table.data();
            for id in &ids.data {
                let lo = *id as usize * dim;
                out.extend_from_slice(&tdata[lo..lo + dim]);
            }
        }
        let ids_vec = ids.data.clone();
        let shape = vec![ids.batch, ids.len, dim];
        let table = self.arg(table);
        let tracked = table.node.is_some();
        self.finish(
            "embedding",
            Op::Embedding {
                table,
                ids: ids_vec,
            },
            Tensor::new_unchecked(shape, out),
            tracked,
        )
    }

    pub fn sum(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let total: S = a.data().iter().copied().sum();
        let a = self.arg(a);
        let tracked = a.node.is_some();
        self.finish("sum", Op::Sum { a }, Tensor::scalar(total), tracked)
    }

    pub fn mean(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let total: S = a.data().iter().copied().sum();
        let mean = total / S::from_f64_lossy(a.len() as f64);
        let a = self.arg(a);
        let tracked = a.node.is_some();
        self.finish("mean", Op::Mean { a }, Tensor::scalar(mean), tracked)
    }

    /// Inverted dropout. Identity in eval mode or at rate zero; in train
    /// mode the mask comes from the stream keyed by (seed, step, op index),
    /// so runs are bit-reproducible.
    pub fn dropout(&self, a: &Tensor<S>, rate: f64) -> Result<Tensor<S>> {
        if !self.train || rate == 0.0 {
            return Ok(a.clone());
        }
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        let op_index = self.op_counter.get();
        self.op_counter.set(op_index + 1);
        let mut rng = stream(self.seed, Domain::Dropout, self.step, op_index);
        let keep_scale = S::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..a.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let out: Vec<S> = a.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let shape = a.shape().to_vec();
        let a = self.arg(a);
        let tracked = a.node.is_some();
        self.finish(
            "dropout",
            Op::Dropout { a, mask },
            Tensor::new_unchecked(shape, out),
            tracked,
        )
    }

    /// Mean cross-entropy from logits over rows whose label is not the
    /// ignore sentinel. Zero (with zero gradient) when every row is ignored.
    pub fn cross_entropy(&self, logits: &Tensor<S>, labels: &[i64], ignore: i64) -> Result<Tensor<S>> {
        if logits.rank() < 2 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                expected: "rank >= 2 logits".into(),
                actual: shape_str(logits.shape()),
            });
        }
        let classes = *logits.shape().last().unwrap();
        let rows = logits.len() / classes;
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                expected: format!("{rows} labels"),
                actual: format!("{}", labels.len()),
            });
        }
        let mut probs = vec![S::zero(); logits.len()];
        let mut total = S::zero();
        let mut count = 0usize;
        let norm_labels: Vec<i64> = labels.iter().map(|l| if *l == ignore { -1 } else { *l }).collect();
        {
            let ldata = logits.data();
            for (r, label) in norm_labels.iter().enumerate() {
                let lo = r * classes;
                let row = &ldata[lo..lo + classes];
                let mut max = row[0];
                for v in row {
                    if *v > max {
                        max = *v;
                    }
                }
                let mut sumexp = S::zero();
                for v in row {
                    sumexp += (*v - max).exp();
                }
                let logsumexp = max + sumexp.ln();
                for (j, v) in row.iter().enumerate() {
                    probs[lo + j] = (*v - logsumexp).exp();
                }
                if *label >= 0 {
                    if *label as usize >= classes {
                        return Err(Error::ShapeMismatch {
                            op: "cross_entropy",
                            expected: format!("label < {classes}"),
                            actual: format!("{label}"),
                        });
                    }
                    total += logsumexp - row[*label as usize];
                    count += 1;
                }
            }
        }
        let loss = if count == 0 {
            S::zero()
        } else {
            total / S::from_f64_lossy(count as f64)
        };
        let logits = self.arg(logits);
        let tracked = logits.node.is_some();
        self.finish(
            "cross_entropy",
            Op::CrossEntropy {
                logits,
                probs,
                labels: norm_labels,
                count,
            },
            Tensor::scalar(loss),
            tracked,
        )
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    let err = |expected: String| Error::ShapeMismatch {
        op: "matmul",
        expected,
        actual: format!("{} x {}", shape_str(a), shape_str(b)),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err("both operands rank >= 2".into()));
    }
    if b.len() == 2 {
        let k = a[a.len() - 1];
        if b[0] != k {
            return Err(err(format!("inner extents to match ({k})")));
        }
        let m: usize = a[..a.len() - 1].iter().product();
        let n = b[1];
        let mut out_shape = a[..a.len() - 1].to_vec();
        out_shape.push(n);
        Ok((
            MatmulDims {
                batch: 1,
                m,
                k,
                n,
                broadcast_b: false,
            },
            out_shape,
        ))
    } else if a.len() == b.len() {
        let lead = &a[..a.len() - 2];
        if lead != &b[..b.len() - 2] {
            return Err(err("equal leading batch extents".into()));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = (b[b.len() - 2], b[b.len() - 1]);
        if bk != k {
            return Err(err(format!("inner extents to match ({k})")));
        }
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok((
            MatmulDims {
                batch,
                m,
                k,
                n,
                broadcast_b: false,
            },
            out_shape,
        ))
    } else {
        Err(err("rank-2 rhs or equal-rank batched operands".into()))
    }
}

fn is_suffix(suffix: &[usize], of: &[usize]) -> bool {
    suffix.len() <= of.len() && of[of.len() - suffix.len()..] == *suffix
}
