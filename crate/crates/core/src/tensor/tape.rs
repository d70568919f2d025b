//! Gradient tape: an ordered record of executed ops with the activations
//! their backward passes need. Records are appended in execution order, so
//! inputs always precede outputs; backward walks them once, in reverse.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_str, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::{self, inverse_axes};
use crate::tensor::{element_count, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub struct Tape<S: Scalar> {
    pub(crate) id: u64,
    pub(crate) nodes: RefCell<Vec<Node<S>>>,
}

pub(crate) struct Node<S: Scalar> {
    pub shape: Vec<usize>,
    pub op: Op<S>,
    /// For leaf records: the tensor whose grad slot receives the result.
    pub leaf: Option<Tensor<S>>,
}

/// An op input: its tape node (when gradients flow through it) and its
/// forward value, saved for the backward pass.
pub(crate) struct Arg<S: Scalar> {
    pub node: Option<usize>,
    pub value: Tensor<S>,
}

#[derive(Clone, Copy)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub broadcast_b: bool,
}

pub(crate) enum Op<S: Scalar> {
    Leaf,
    Matmul {
        a: Arg<S>,
        b: Arg<S>,
        dims: MatmulDims,
    },
    /// `b` may be a suffix-shaped broadcast of `a`.
    Add {
        a: Arg<S>,
        b: Arg<S>,
    },
    Mul {
        a: Arg<S>,
        b: Arg<S>,
    },
    Scale {
        a: Arg<S>,
        factor: S,
    },
    Permute {
        a: Arg<S>,
        axes: Vec<usize>,
    },
    Reshape {
        a: Arg<S>,
    },
    Concat {
        parts: Vec<Arg<S>>,
        axis: usize,
    },
    Slice {
        a: Arg<S>,
        axis: usize,
        start: usize,
    },
    /// Covers both the plain and the key-masked variant; masked positions
    /// have exactly zero output, which the backward formula preserves.
    Softmax {
        a: Arg<S>,
        y: Tensor<S>,
    },
    LayerNorm {
        x: Arg<S>,
        gamma: Arg<S>,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        beta_node: Option<usize>,
    },
    Gelu {
        x: Arg<S>,
    },
    Tanh {
        x: Arg<S>,
        y: Tensor<S>,
    },
    Embedding {
        table: Arg<S>,
        ids: Vec<u32>,
    },
    Sum {
        a: Arg<S>,
    },
    Mean {
        a: Arg<S>,
    },
    /// `mask` holds the already-scaled keep factors (0 or 1/(1-p)).
    Dropout {
        a: Arg<S>,
        mask: Vec<S>,
    },
    CrossEntropy {
        logits: Arg<S>,
        probs: Vec<S>,
        labels: Vec<i64>,
        count: usize,
    },
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register `t` as a leaf (idempotent per tape).
    pub(crate) fn leaf(&self, t: &Tensor<S>) -> usize {
        if let Some(id) = t.node_on(self.id) {
            return id;
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            leaf: Some(t.clone()),
        });
        t.set_node(self.id, id);
        id
    }

    pub(crate) fn record(&self, op: Op<S>, out: &Tensor<S>) {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape: out.shape().to_vec(),
            op,
            leaf: None,
        });
        out.set_node(self.id, id);
    }

    /// Reverse-mode sweep from a scalar root. Gradients of every recorded
    /// tensor with `requires_grad` accumulate into its grad slot; repeated
    /// backward calls keep accumulating until `zero_grad`.
    pub fn backward(&self, root: &Tensor<S>) -> Result<()> {
        if root.len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: shape_str(root.shape()),
            });
        }
        let root_node = root.node_on(self.id).ok_or(Error::RootNotOnTape)?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[root_node] = Some(vec![S::one()]);

        for id in (0..=root_node).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(leaf) = &node.leaf {
                if leaf.requires_grad() {
                    leaf.accumulate_grad(&gout);
                }
            }
            node.op.backward(&gout, &node.shape, &mut grads);
        }
        Ok(())
    }
}

fn accum<S: Scalar>(grads: &mut [Option<Vec<S>>], node: usize, delta: Vec<S>) {
    match &mut grads[node] {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(&delta) {
                *gi += *di;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Copy a `[start, start+len)` range along `axis` out of `src`.
pub(crate) fn slice_axis<S: Scalar>(
    src: &[S],
    src_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<S> {
    let outer: usize = src_shape[..axis].iter().product();
    let inner: usize = src_shape[axis + 1..].iter().product();
    let extent = src_shape[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner;
        out.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
    }
    out
}

/// Inverse of `slice_axis`: add `src` into the `[start, ...)` range of a
/// zeroed buffer shaped like `dst_shape`.
fn embed_axis<S: Scalar>(
    src: &[S],
    dst_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<S> {
    let outer: usize = dst_shape[..axis].iter().product();
    let inner: usize = dst_shape[axis + 1..].iter().product();
    let extent = dst_shape[axis];
    let mut out = vec![S::zero(); element_count(dst_shape)];
    for o in 0..outer {
        let dst_base = o * extent * inner + start * inner;
        let src_base = o * len * inner;
        out[dst_base..dst_base + len * inner].copy_from_slice(&src[src_base..src_base + len * inner]);
    }
    out
}

impl<S: Scalar> Op<S> {
    fn backward(&self, gout: &[S], out_shape: &[usize], grads: &mut [Option<Vec<S>>]) {
        match self {
            Op::Leaf => {}
            Op::Matmul { a, b, dims } => {
                let MatmulDims {
                    batch,
                    m,
                    k,
                    n,
                    broadcast_b,
                } = *dims;
                if let Some(na) = a.node {
                    let bdata = b.value.data();
                    let da = ops::matmul_nt(gout, &bdata, batch, m, n, k, broadcast_b);
                    accum(grads, na, da);
                }
                if let Some(nb) = b.node {
                    let adata = a.value.data();
                    let db = ops::matmul_tn(&adata, gout, batch, m, k, n, broadcast_b);
                    accum(grads, nb, db);
                }
            }
            Op::Add { a, b } => {
                if let Some(na) = a.node {
                    accum(grads, na, gout.to_vec());
                }
                if let Some(nb) = b.node {
                    accum(grads, nb, ops::sum_to_suffix(gout, b.value.len()));
                }
            }
            Op::Mul { a, b } => {
                if let Some(na) = a.node {
                    let bdata = b.value.data();
                    let da: Vec<S> = gout.iter().zip(bdata.iter()).map(|(g, v)| *g * *v).collect();
                    accum(grads, na, da);
                }
                if let Some(nb) = b.node {
                    let adata = a.value.data();
                    let db: Vec<S> = gout.iter().zip(adata.iter()).map(|(g, v)| *g * *v).collect();
                    accum(grads, nb, db);
                }
            }
            Op::Scale { a, factor } => {
                if let Some(na) = a.node {
                    accum(grads, na, gout.iter().map(|g| *g * *factor).collect());
                }
            }
            Op::Permute { a, axes } => {
                if let Some(na) = a.node {
                    accum(grads, na, ops::permute(gout, out_shape, &inverse_axes(axes)));
                }
            }
            Op::Reshape { a } => {
                if let Some(na) = a.node {
                    accum(grads, na, gout.to_vec());
                }
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for part in parts {
                    let len = part.value.shape()[*axis];
                    if let Some(np) = part.node {
                        accum(grads, np, slice_axis(gout, out_shape, *axis, start, len));
                    }
                    start += len;
                }
            }
            Op::Slice { a, axis, start } => {
                if let Some(na) = a.node {
                    let len = out_shape[*axis];
                    accum(
                        grads,
                        na,
                        embed_axis(gout, a.value.shape(), *axis, *start, len),
                    );
                }
            }
            Op::Softmax { a, y } => {
                if let Some(na) = a.node {
                    let ydata = y.data();
                    let row_len = *out_shape.last().unwrap();
                    let mut dx = vec![S::zero(); gout.len()];
                    for r in 0..gout.len() / row_len {
                        let lo = r * row_len;
                        let hi = lo + row_len;
                        let yr = &ydata[lo..hi];
                        let gr = &gout[lo..hi];
                        let mut dot = S::zero();
                        for (g, yv) in gr.iter().zip(yr) {
                            dot += *g * *yv;
                        }
                        for i in 0..row_len {
                            dx[lo + i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    accum(grads, na, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                xhat,
                inv_std,
                beta_node,
            } => {
                let dim = *out_shape.last().unwrap();
                let rows = gout.len() / dim;
                let gdata = gamma.value.data();
                if let Some(ng) = gamma.node {
                    let mut dgamma = vec![S::zero(); dim];
                    for r in 0..rows {
                        for j in 0..dim {
                            dgamma[j] += gout[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                    accum(grads, ng, dgamma);
                }
                if let Some(nb) = beta_node {
                    let mut dbeta = vec![S::zero(); dim];
                    for r in 0..rows {
                        for j in 0..dim {
                            dbeta[j] += gout[r * dim + j];
                        }
                    }
                    accum(grads, *nb, dbeta);
                }
                if let Some(nx) = x.node {
                    let dim_s = S::from_f64_lossy(dim as f64);
                    let mut dx = vec![S::zero(); gout.len()];
                    for r in 0..rows {
                        let lo = r * dim;
                        let mut mean_g = S::zero();
                        let mut mean_gx = S::zero();
                        for j in 0..dim {
                            let gg = gout[lo + j] * gdata[j];
                            mean_g += gg;
                            mean_gx += gg * xhat[lo + j];
                        }
                        mean_g /= dim_s;
                        mean_gx /= dim_s;
                        for j in 0..dim {
                            let gg = gout[lo + j] * gdata[j];
                            dx[lo + j] = inv_std[r] * (gg - mean_g - xhat[lo + j] * mean_gx);
                        }
                    }
                    accum(grads, nx, dx);
                }
            }
            Op::Gelu { x } => {
                if let Some(nx) = x.node {
                    let xdata = x.value.data();
                    let dx: Vec<S> = gout
                        .iter()
                        .zip(xdata.iter())
                        .map(|(g, xv)| *g * ops::gelu_derivative(*xv))
                        .collect();
                    accum(grads, nx, dx);
                }
            }
            Op::Tanh { x, y } => {
                if let Some(nx) = x.node {
                    let ydata = y.data();
                    let dx: Vec<S> = gout
                        .iter()
                        .zip(ydata.iter())
                        .map(|(g, yv)| *g * (S::one() - *yv * *yv))
                        .collect();
                    accum(grads, nx, dx);
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(nt) = table.node {
                    let dim = *out_shape.last().unwrap();
                    let mut dtable = vec![S::zero(); table.value.len()];
                    for (row, id) in ids.iter().enumerate() {
                        let src = &gout[row * dim..(row + 1) * dim];
                        let dst = &mut dtable[*id as usize * dim..(*id as usize + 1) * dim];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                    accum(grads, nt, dtable);
                }
            }
            Op::Sum { a } => {
                if let Some(na) = a.node {
                    accum(grads, na, vec![gout[0]; a.value.len()]);
                }
            }
            Op::Mean { a } => {
                if let Some(na) = a.node {
                    let scale = gout[0] / S::from_f64_lossy(a.value.len() as f64);
                    accum(grads, na, vec![scale; a.value.len()]);
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(na) = a.node {
                    let dx: Vec<S> = gout.iter().zip(mask.iter()).map(|(g, m)| *g * *m).collect();
                    accum(grads, na, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                count,
            } => {
                if let Some(nl) = logits.node {
                    let classes = *logits.value.shape().last().unwrap();
                    let mut dl = vec![S::zero(); logits.value.len()];
                    if *count > 0 {
                        let scale = gout[0] / S::from_f64_lossy(*count as f64);
                        for (row, label) in labels.iter().enumerate() {
                            if *label < 0 {
                                continue;
                            }
                            let lo = row * classes;
                            for c in 0..classes {
                                let indicator = if c as i64 == *label { S::one() } else { S::zero() };
                                dl[lo + c] = scale * (probs[lo + c] - indicator);
                            }
                        }
                    }
                    accum(grads, nl, dl);
                }
            }
        }
    }
}
