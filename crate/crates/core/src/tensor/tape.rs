//! Reverse-mode differentiation.
//!
//! A [`Tape`] records each differentiable op in execution order together with
//! the values its backward rule needs. [`Tape::backward`] walks the records
//! in exact reverse. Values produced from untracked inputs (constants) or on
//! an inference tape are never recorded, so inference keeps only the arrays
//! that are still referenced.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::kernels::{self, CrossEntropyCache, LayerNormCache, PatchGeometry};
use super::{Element, Tensor};
use crate::error::{Error, Result};

type In = Option<usize>;

enum Op<T> {
    Leaf,
    Add(In, In),
    Mul {
        a: In,
        b: In,
        av: Arc<Tensor<T>>,
        bv: Arc<Tensor<T>>,
    },
    Scale(In, T),
    Broadcast {
        x: In,
        from: Vec<usize>,
    },
    MatMul {
        a: In,
        b: In,
        av: Arc<Tensor<T>>,
        bv: Arc<Tensor<T>>,
    },
    Linear {
        x: In,
        w: In,
        b: In,
        xv: Arc<Tensor<T>>,
        wv: Arc<Tensor<T>>,
    },
    Softmax {
        x: In,
        y: Arc<Tensor<T>>,
        axis: usize,
    },
    LayerNorm {
        x: In,
        gamma: In,
        beta: In,
        gv: Arc<Tensor<T>>,
        cache: LayerNormCache<T>,
    },
    Gelu {
        x: In,
        xv: Arc<Tensor<T>>,
    },
    MeanReduce {
        x: In,
        axis: usize,
        from: Vec<usize>,
    },
    SumAll {
        x: In,
        from: Vec<usize>,
    },
    Reshape {
        x: In,
        from: Vec<usize>,
    },
    Permute {
        x: In,
        perm: Vec<usize>,
    },
    PatchTokens {
        x: In,
        w: In,
        b: In,
        cols: Tensor<T>,
        wv: Arc<Tensor<T>>,
        geo: PatchGeometry,
    },
    Resize {
        x: In,
        from: (usize, usize),
    },
    AvgPool {
        x: In,
        from: Vec<usize>,
        grid: (usize, usize),
        r: usize,
    },
    CrossEntropy {
        logits: In,
        cache: CrossEntropyCache<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// Ordered record of executed differentiable operations.
///
/// A tape belongs to one execution context; independent tapes can run on
/// different threads at once.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
    consumed: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    /// Tape that records operations for [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
        }
    }

    /// Tape that never records; every value it produces is a constant.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded operations (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all records so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        let value = value.into();
        let id = self.recording.then(|| {
            self.push(Node {
                op: Op::Leaf,
                shape: value.shape().to_vec(),
            })
        });
        Var {
            tape: self,
            id,
            value,
        }
    }

    /// Untracked input.
    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        Var {
            tape: self,
            id: None,
            value: value.into(),
        }
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn record(&self, inputs: &[In], value: Tensor<T>, op: impl FnOnce() -> Op<T>) -> Var<'_, T> {
        let tracked = self.recording && inputs.iter().any(Option::is_some);
        let id = tracked.then(|| {
            self.push(Node {
                op: op(),
                shape: value.shape().to_vec(),
            })
        });
        Var {
            tape: self,
            id,
            value: Arc::new(value),
        }
    }

    /// Propagates d`loss`/d(node) back through every record. Fails on a
    /// non-scalar or untracked loss, and on a second call before [`Tape::reset`].
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Tape("loss was computed on a different tape".into()));
        }
        if loss.value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let root = loss
            .id
            .ok_or_else(|| Error::Tape("loss is detached from the tape".into()))?;
        if self.consumed.replace(true) {
            return Err(Error::Tape("backward already ran on this tape; reset it first".into()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(loss.value.shape().to_vec()));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&node.op, &g, &mut grads);
        }
        let leaf_grads = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match n.op {
                Op::Leaf => Some(g.unwrap_or_else(|| Tensor::zeros(n.shape.clone()))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: leaf_grads })
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], target: In, g: Tensor<T>) {
    let Some(id) = target else { return };
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn propagate<T: Element>(op: &Op<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Mul { a, b, av, bv } => {
            if a.is_some() {
                accumulate(grads, *a, kernels::mul(g, bv).unwrap());
            }
            if b.is_some() {
                accumulate(grads, *b, kernels::mul(g, av).unwrap());
            }
        }
        Op::Scale(x, c) => accumulate(grads, *x, kernels::scale(g, *c)),
        Op::Broadcast { x, from } => accumulate(grads, *x, kernels::sum_to_shape(g, from)),
        Op::MatMul { a, b, av, bv } => {
            let (da, db) = kernels::matmul_backward(av, bv, g);
            accumulate(grads, *a, da);
            accumulate(grads, *b, db);
        }
        Op::Linear { x, w, b, xv, wv } => {
            let (dx, dw, db) = kernels::linear_backward(xv, wv, g);
            accumulate(grads, *x, dx);
            accumulate(grads, *w, dw);
            accumulate(grads, *b, db);
        }
        Op::Softmax { x, y, axis } => accumulate(grads, *x, kernels::softmax_backward(y, g, *axis)),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            gv,
            cache,
        } => {
            let (dx, dg, db) = kernels::layer_norm_backward(cache, gv, g);
            accumulate(grads, *x, dx);
            accumulate(grads, *gamma, dg);
            accumulate(grads, *beta, db);
        }
        Op::Gelu { x, xv } => accumulate(grads, *x, kernels::gelu_backward(xv, g)),
        Op::MeanReduce { x, axis, from } => {
            accumulate(grads, *x, kernels::mean_reduce_backward(g, from, *axis))
        }
        Op::SumAll { x, from } => {
            accumulate(grads, *x, Tensor::full(from.clone(), g.data()[0]));
        }
        Op::Reshape { x, from } => accumulate(grads, *x, g.clone().reshaped(from.clone()).unwrap()),
        Op::Permute { x, perm } => {
            let inv = kernels::inverse_permutation(perm);
            accumulate(grads, *x, kernels::permute(g, &inv).unwrap());
        }
        Op::PatchTokens {
            x,
            w,
            b,
            cols,
            wv,
            geo,
        } => {
            let (dx, dw, db) = kernels::patch_tokens_backward(cols, wv, geo, g);
            accumulate(grads, *x, dx);
            accumulate(grads, *w, dw);
            accumulate(grads, *b, db);
        }
        Op::Resize { x, from } => {
            accumulate(grads, *x, kernels::bilinear_resize_backward(g, from.0, from.1))
        }
        Op::AvgPool { x, from, grid, r } => {
            accumulate(grads, *x, kernels::avg_pool_tokens_backward(g, from, *grid, *r))
        }
        Op::CrossEntropy { logits, cache } => {
            accumulate(grads, *logits, kernels::cross_entropy_backward(cache, g.data()[0]))
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf created with [`Tape::param`]; `None` for non-leaves
    /// and constants.
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Moves a leaf gradient out.
    pub fn take(&mut self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        var.id.and_then(|id| self.grads.get_mut(id)?.take())
    }
}

/// A value on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: In,
    value: Arc<Tensor<T>>,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Copy of the value that is not connected to the tape.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value.clone())
    }

    pub fn into_value(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Tape("operands live on different tapes".into()))
        }
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let v = kernels::add(&self.value, &other.value)?;
        Ok(self.tape.record(&[self.id, other.id], v, || Op::Add(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let v = kernels::mul(&self.value, &other.value)?;
        Ok(self.tape.record(&[self.id, other.id], v, || Op::Mul {
            a: self.id,
            b: other.id,
            av: self.value.clone(),
            bv: other.value.clone(),
        }))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let v = kernels::scale(&self.value, c);
        self.tape.record(&[self.id], v, || Op::Scale(self.id, c))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = kernels::broadcast_to(&self.value, shape)?;
        Ok(self.tape.record(&[self.id], v, || Op::Broadcast {
            x: self.id,
            from: self.shape().to_vec(),
        }))
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let v = kernels::matmul(&self.value, &other.value)?;
        Ok(self.tape.record(&[self.id, other.id], v, || Op::MatMul {
            a: self.id,
            b: other.id,
            av: self.value.clone(),
            bv: other.value.clone(),
        }))
    }

    /// `self[.., in] · weight[in, out] + bias[out]`.
    pub fn linear(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        self.same_tape(weight)?;
        if let Some(b) = bias {
            self.same_tape(b)?;
        }
        let v = kernels::linear(&self.value, &weight.value, bias.map(|b| b.value.as_ref()))?;
        let bid = bias.and_then(|b| b.id);
        Ok(self.tape.record(&[self.id, weight.id, bid], v, || Op::Linear {
            x: self.id,
            w: weight.id,
            b: bid,
            xv: self.value.clone(),
            wv: weight.value.clone(),
        }))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let v = kernels::softmax(&self.value, axis)?;
        let tracked = self.tape.recording && self.id.is_some();
        let y = Arc::new(v);
        let id = tracked.then(|| {
            self.tape.push(Node {
                op: Op::Softmax {
                    x: self.id,
                    y: y.clone(),
                    axis,
                },
                shape: y.shape().to_vec(),
            })
        });
        Ok(Var {
            tape: self.tape,
            id,
            value: y,
        })
    }

    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let tracked = self.tape.recording && [self.id, gamma.id, beta.id].iter().any(Option::is_some);
        if !tracked {
            let v = kernels::layer_norm_forward(&self.value, &gamma.value, &beta.value, eps)?;
            return Ok(self.tape.record(&[], v, || unreachable!("untracked")));
        }
        let (v, cache) = kernels::layer_norm(&self.value, &gamma.value, &beta.value, eps)?;
        Ok(self.tape.record(&[self.id, gamma.id, beta.id], v, || Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            gv: gamma.value.clone(),
            cache,
        }))
    }

    pub fn gelu(&self) -> Var<'t, T> {
        let v = kernels::gelu(&self.value);
        self.tape.record(&[self.id], v, || Op::Gelu {
            x: self.id,
            xv: self.value.clone(),
        })
    }

    pub fn mean_reduce(&self, axis: usize) -> Result<Var<'t, T>> {
        let v = kernels::mean_reduce(&self.value, axis)?;
        Ok(self.tape.record(&[self.id], v, || Op::MeanReduce {
            x: self.id,
            axis,
            from: self.shape().to_vec(),
        }))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let v = kernels::sum_all(&self.value);
        self.tape.record(&[self.id], v, || Op::SumAll {
            x: self.id,
            from: self.shape().to_vec(),
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = (*self.value).clone().reshaped(shape.to_vec())?;
        Ok(self.tape.record(&[self.id], v, || Op::Reshape {
            x: self.id,
            from: self.shape().to_vec(),
        }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let v = kernels::permute(&self.value, perm)?;
        Ok(self.tape.record(&[self.id], v, || Op::Permute {
            x: self.id,
            perm: perm.to_vec(),
        }))
    }

    /// Strided patch projection into token layout `[B, (H/s)·(W/s), E]`.
    pub fn patch_tokens(
        &self,
        weight: &Var<'t, T>,
        bias: &Var<'t, T>,
        kernel: usize,
        stride: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        let (v, cols, geo) = kernels::patch_tokens(&self.value, &weight.value, &bias.value, kernel, stride)?;
        Ok(self.tape.record(&[self.id, weight.id, bias.id], v, || Op::PatchTokens {
            x: self.id,
            w: weight.id,
            b: bias.id,
            cols,
            wv: weight.value.clone(),
            geo,
        }))
    }

    /// Strided patch projection `[B,C,H,W] -> [B,E,H/s,W/s]`.
    pub fn strided_patch_projection(
        &self,
        weight: &Var<'t, T>,
        bias: &Var<'t, T>,
        kernel: usize,
        stride: usize,
    ) -> Result<Var<'t, T>> {
        let tokens = self.patch_tokens(weight, bias, kernel, stride)?;
        let s = self.shape();
        let (b, e) = (s[0], weight.shape()[0]);
        let (ho, wo) = (s[2] / stride, s[3] / stride);
        tokens.permute(&[0, 2, 1])?.reshape(&[b, e, ho, wo])
    }

    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let v = kernels::bilinear_resize(&self.value, out_h, out_w)?;
        let s = self.shape();
        let from = (s[2], s[3]);
        Ok(self.tape.record(&[self.id], v, || Op::Resize { x: self.id, from }))
    }

    pub fn avg_pool_tokens(&self, grid: (usize, usize), r: usize) -> Result<Var<'t, T>> {
        let v = kernels::avg_pool_tokens(&self.value, grid, r)?;
        Ok(self.tape.record(&[self.id], v, || Op::AvgPool {
            x: self.id,
            from: self.shape().to_vec(),
            grid,
            r,
        }))
    }

    /// Mean pixel cross-entropy of `self[B,K,H,W]` against class ids. The
    /// flag is true when every pixel was ignored (the loss is then 0).
    pub fn cross_entropy(&self, targets: &[u8], ignore_index: Option<u8>) -> Result<(Var<'t, T>, bool)> {
        let (loss, cache) = kernels::cross_entropy(&self.value, targets, ignore_index)?;
        let all_ignored = cache.counted == 0;
        let var = self.tape.record(&[self.id], Tensor::scalar(loss), || Op::CrossEntropy {
            logits: self.id,
            cache,
        });
        Ok((var, all_ignored))
    }
}
