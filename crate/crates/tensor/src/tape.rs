use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{Result, TensorError};
use crate::tensor::{Shape, Tensor};

/// Backward rule of one recorded node. Receives the upstream gradient and a
/// `needs` mask (one entry per logical input slot); returns one gradient per
/// slot, `None` where the mask is false. Rules operate on detached tensors
/// only, so running them never records new nodes.
pub(crate) type BackwardFn =
    Box<dyn Fn(&Tensor, &[bool]) -> Result<Vec<Option<Tensor>>> + Send>;

pub(crate) struct Node {
    /// Tape ids of the logical inputs; `None` marks a constant input.
    inputs: Vec<Option<usize>>,
    shape: Shape,
    /// `None` for leaves.
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    nodes: Vec<Node>,
    watched: Vec<usize>,
}

/// Link from a tensor back to the tape node that produced it.
#[derive(Clone)]
pub(crate) struct TapeHandle {
    pub tape: Arc<Mutex<TapeInner>>,
    pub id: usize,
}

impl TapeHandle {
    fn same_tape(&self, other: &TapeHandle) -> bool {
        Arc::ptr_eq(&self.tape, &other.tape)
    }
}

/// Dynamically recorded computation tape for reverse-mode differentiation.
///
/// Recording is implicit: any op whose input carries a handle to this tape
/// appends a node and attaches the output. Order of appends is execution
/// order, so every node's inputs precede it. Recording is single-threaded
/// by contract; the mutex only guards against accidental misuse.
pub struct GradTape {
    inner: Arc<Mutex<TapeInner>>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { inner: Arc::new(Mutex::new(TapeInner::default())) }
    }

    /// Registers a tensor as a trainable leaf and returns the attached copy.
    /// Gradients accumulate for watched leaves during [`GradTape::backward`].
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let mut inner = self.inner.lock().unwrap();
        if let Some(handle) = &t.node {
            if Arc::ptr_eq(&handle.tape, &self.inner) {
                if !inner.watched.contains(&handle.id) {
                    inner.watched.push(handle.id);
                }
                return t.clone();
            }
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node { inputs: Vec::new(), shape: t.shape(), backward: None });
        inner.watched.push(id);
        drop(inner);
        let mut out = t.detach();
        out.node = Some(TapeHandle { tape: Arc::clone(&self.inner), id });
        out
    }

    pub fn node_count(&self) -> usize {
        self.inner.lock().unwrap().nodes.len()
    }

    /// Reverse-topological gradient accumulation from a scalar loss.
    ///
    /// Every watched leaf receives a gradient of its own shape (zeros when it
    /// does not influence the loss). Tensors that never participated in the
    /// recorded graph have no entry at all.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let handle = loss.node.as_ref().ok_or(TensorError::NotOnTape)?;
        if !Arc::ptr_eq(&handle.tape, &self.inner) {
            return Err(TensorError::NotOnTape);
        }
        if loss.numel() != 1 {
            return Err(TensorError::LossNotScalar { shape: loss.shape() });
        }
        let inner = self.inner.lock().unwrap();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; inner.nodes.len()];
        grads[handle.id] = Some(vec![1.0]);

        for id in (0..=handle.id).rev() {
            let Some(gdata) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            let Some(backward) = &node.backward else {
                grads[id] = Some(gdata); // keep leaf gradients
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|s| s.is_some()).collect();
            if needs.iter().any(|&n| n) {
                let gout = Tensor::from_parts(node.shape, gdata);
                let input_grads = backward(&gout, &needs)?;
                for (slot, grad) in node.inputs.iter().zip(input_grads) {
                    let (Some(input_id), Some(g)) = (slot, grad) else { continue };
                    let in_shape = inner.nodes[*input_id].shape;
                    debug_assert_eq!(g.shape(), in_shape, "backward rule shape bug");
                    match &mut grads[*input_id] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(g.data()) {
                                *a += v;
                            }
                        }
                        none => *none = Some(g.data().to_vec()),
                    }
                }
            }
        }

        let mut by_node = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                by_node.insert(id, Tensor::from_parts(inner.nodes[id].shape, g));
            }
        }
        for &id in &inner.watched {
            by_node
                .entry(id)
                .or_insert_with(|| Tensor::from_parts(inner.nodes[id].shape, {
                    let n: usize = inner.nodes[id].shape.iter().product();
                    vec![0.0; n]
                }));
        }
        Ok(Gradients { tape: Arc::clone(&self.inner), by_node })
    }
}

impl Default for GradTape {
    fn default() -> Self {
        GradTape::new()
    }
}

/// Gradients produced by one backward pass, keyed by tape node.
pub struct Gradients {
    tape: Arc<Mutex<TapeInner>>,
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`, if `t` is on the tape and received one.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        let handle = t.node.as_ref()?;
        if !Arc::ptr_eq(&handle.tape, &self.tape) {
            return None;
        }
        self.by_node.get(&handle.id)
    }
}

/// A differentiable operation defined outside this crate.
///
/// Implementors compute the forward result themselves and capture (detached)
/// whatever the backward rule needs; [`apply_custom`] handles recording.
pub trait CustomOp: Send + 'static {
    fn name(&self) -> &'static str;
    /// Same contract as the internal backward rules: one gradient per input
    /// slot, `None` where `needs` is false.
    fn backward(&self, grad_out: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>>;
}

/// Records a custom op with the given inputs and precomputed output.
pub fn apply_custom(
    op: impl CustomOp,
    inputs: &[&Tensor],
    out_shape: Shape,
    out_data: Vec<f32>,
) -> Result<Tensor> {
    let name = op.name();
    record_op(inputs, out_shape, out_data, Box::new(move |g, needs| op.backward(g, needs)), name)
}

/// Shared recording path for all ops: checks finiteness, finds the unique
/// tape among the inputs (if any), and appends a node.
pub(crate) fn record_op(
    inputs: &[&Tensor],
    out_shape: Shape,
    out_data: Vec<f32>,
    backward: BackwardFn,
    op: &'static str,
) -> Result<Tensor> {
    if !out_data.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    let mut tape: Option<&TapeHandle> = None;
    for input in inputs {
        if let Some(h) = &input.node {
            match tape {
                None => tape = Some(h),
                Some(t) if t.same_tape(h) => {}
                Some(_) => return Err(TensorError::TapeMismatch { op }),
            }
        }
    }
    let mut out = Tensor::from_parts(out_shape, out_data);
    if let Some(handle) = tape {
        let mut inner = handle.tape.lock().unwrap();
        let id = inner.nodes.len();
        let slots = inputs.iter().map(|i| i.node.as_ref().map(|h| h.id)).collect();
        inner.nodes.push(Node { inputs: slots, shape: out_shape, backward: Some(backward) });
        drop(inner);
        out.node = Some(TapeHandle { tape: Arc::clone(&handle.tape), id });
    }
    Ok(out)
}
