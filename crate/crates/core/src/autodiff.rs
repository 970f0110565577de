//! Minimal dense-tensor math with reverse-mode gradients.
//!
//! Covers exactly what the learnable pieces need: gated recurrent layers, a
//! linear classifier, log-softmax, the alignment loss and a small MLP. Values
//! and gradients are f64 throughout; model files store f32 payloads.
//!
//! Gradients accumulate: calling [`backward`] twice without
//! [`Tensor::zero_grad`] adds contributions, which is what gradient
//! accumulation over a batch relies on.
//!
//! Shape agreement inside composite ops is a programming invariant and
//! panics; public model entry points validate their inputs and surface
//! [`TensorError::ShapeError`].

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use thiserror::Error;

use crate::ctc::{self, CollapseMode, CtcError, LabelSequence, PosteriorSequence};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("backward on a tensor with no recorded graph")]
    NoGraph,
    #[error("ctc: {0}")]
    Ctc(#[from] CtcError),
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Receives (upstream gradient, output values, parents, sink); emits
/// per-parent-index gradient contributions into the sink. Reading values at
/// backward time keeps op closures free of captured copies.
type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor], &mut dyn FnMut(usize, Vec<f64>))>;

struct TensorNode {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A dense tensor participating in a dynamically recorded computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<TensorNode>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// A graph leaf. Parameters pass `requires_grad = true`; inputs `false`.
    pub fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf shape/data mismatch"
        );
        Tensor(Rc::new(TensorNode {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn vector(data: Vec<f64>, requires_grad: bool) -> Tensor {
        let n = data.len();
        Tensor::leaf(vec![n], data, requires_grad)
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data.borrow()[0]
    }

    fn derived(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        Tensor(Rc::new(TensorNode {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward: if requires_grad { Some(backward) } else { None },
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Gradient buffer contents (zeros if backward never touched this leaf).
    pub fn grad(&self) -> Vec<f64> {
        self.0
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite leaf values in place (optimizer updates).
    pub fn set_values(&self, values: &[f64]) {
        assert_eq!(values.len(), self.numel());
        self.0.data.borrow_mut().copy_from_slice(values);
    }

    fn data_ref(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub(crate) fn accumulate(&self, delta: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta.iter()) {
                    *b += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }
}

/// Backpropagate from a scalar loss.
///
/// Gradients flow through intermediate nodes transiently and accumulate
/// persistently on `requires_grad` leaves, so repeated backward calls add
/// contributions there.
pub fn backward(loss: &Tensor) -> Result<(), TensorError> {
    if loss.numel() != 1 {
        return Err(TensorError::ShapeError(format!(
            "backward needs a scalar, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.0.requires_grad {
        return Err(TensorError::NoGraph);
    }
    // collect the reachable grad-bearing subgraph
    let mut stack = vec![loss.clone()];
    let mut seen = std::collections::HashSet::new();
    let mut nodes: Vec<Tensor> = Vec::new();
    while let Some(t) = stack.pop() {
        if !t.0.requires_grad || !seen.insert(t.0.id) {
            continue;
        }
        for p in &t.0.parents {
            stack.push(p.clone());
        }
        nodes.push(t);
    }
    // children were created after parents, so descending id is a valid
    // reverse-topological order
    nodes.sort_by_key(|t| std::cmp::Reverse(t.0.id));
    let mut flows: std::collections::HashMap<u64, Vec<f64>> = std::collections::HashMap::new();
    flows.insert(loss.0.id, vec![1.0]);
    for node in &nodes {
        let Some(out_grad) = flows.remove(&node.0.id) else {
            continue;
        };
        if node.0.parents.is_empty() {
            node.accumulate(&out_grad);
            continue;
        }
        if let Some(backward_fn) = &node.0.backward {
            let parents = &node.0.parents;
            let out_values = node.0.data.borrow();
            backward_fn(&out_grad, &out_values, parents, &mut |idx, delta| {
                let parent = &parents[idx];
                if !parent.0.requires_grad {
                    return;
                }
                flows
                    .entry(parent.0.id)
                    .and_modify(|buf| {
                        for (b, d) in buf.iter_mut().zip(delta.iter()) {
                            *b += d;
                        }
                    })
                    .or_insert(delta);
            });
        }
    }
    Ok(())
}

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "add");
    let data: Vec<f64> = a
        .data_ref()
        .iter()
        .zip(b.data_ref().iter())
        .map(|(x, y)| x + y)
        .collect();
    Tensor::derived(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _out, parents, sink| {
            if parents[0].requires_grad() {
                sink(0, g.to_vec());
            }
            if parents[1].requires_grad() {
                sink(1, g.to_vec());
            }
        }),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "sub");
    let data: Vec<f64> = a
        .data_ref()
        .iter()
        .zip(b.data_ref().iter())
        .map(|(x, y)| x - y)
        .collect();
    Tensor::derived(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _out, parents, sink| {
            if parents[0].requires_grad() {
                sink(0, g.to_vec());
            }
            if parents[1].requires_grad() {
                sink(1, g.iter().map(|x| -x).collect());
            }
        }),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "mul");
    let data: Vec<f64> = a
        .data_ref()
        .iter()
        .zip(b.data_ref().iter())
        .map(|(x, y)| x * y)
        .collect();
    Tensor::derived(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _out, parents, sink| {
            if parents[0].requires_grad() {
                let bv = parents[1].data_ref();
                sink(0, g.iter().zip(bv.iter()).map(|(gi, y)| gi * y).collect());
            }
            if parents[1].requires_grad() {
                let av = parents[0].data_ref();
                sink(1, g.iter().zip(av.iter()).map(|(gi, x)| gi * x).collect());
            }
        }),
    )
}

/// `alpha * a + beta`, elementwise with scalar coefficients.
pub fn affine(a: &Tensor, alpha: f64, beta: f64) -> Tensor {
    let data: Vec<f64> = a.data_ref().iter().map(|x| alpha * x + beta).collect();
    Tensor::derived(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g, _out, parents, sink| {
            if parents[0].requires_grad() {
                sink(0, g.iter().map(|gi| alpha * gi).collect());
            }
        }),
    )
}

/// Matrix-vector product: `w` has shape `[m, n]`, `x` shape `[n]`.
pub fn matvec(w: &Tensor, x: &Tensor) -> Tensor {
    assert_eq!(w.shape().len(), 2, "matvec: w must be 2-D");
    let (m, n) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.shape(), [n], "matvec: inner dimension mismatch");
    let mut data = vec![0.0; m];
    {
        let wv = w.data_ref();
        let xv = x.data_ref();
        for i in 0..m {
            let row = &wv[i * n..(i + 1) * n];
            data[i] = row.iter().zip(xv.iter()).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::derived(
        vec![m],
        data,
        vec![w.clone(), x.clone()],
        Box::new(move |g, _out, parents, sink| {
            if parents[0].requires_grad() {
                let xv = parents[1].data_ref();
                let mut dw = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dw[i * n + j] = g[i] * xv[j];
                    }
                }
                sink(0, dw);
            }
            if parents[1].requires_grad() {
                let wv = parents[0].data_ref();
                let mut dx = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dx[j] += g[i] * wv[i * n + j];
                    }
                }
                sink(1, dx);
            }
        }),
    )
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let data: Vec<f64> = a
        .data_ref()
        .iter()
        .map(|x| 1.0 / (1.0 + (-x).exp()))
        .collect();
    Tensor::derived(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|g, out, parents, sink| {
            if parents[0].requires_grad() {
                sink(
                    0,
                    g.iter()
                        .zip(out.iter())
                        .map(|(gi, y)| gi * y * (1.0 - y))
                        .collect(),
                );
            }
        }),
    )
}

pub fn tanh(a: &Tensor) -> Tensor {
    let data: Vec<f64> = a.data_ref().iter().map(|x| x.tanh()).collect();
    Tensor::derived(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|g, out, parents, sink| {
            if parents[0].requires_grad() {
                sink(
                    0,
                    g.iter()
                        .zip(out.iter())
                        .map(|(gi, y)| gi * (1.0 - y * y))
                        .collect(),
                );
            }
        }),
    )
}

pub fn relu(a: &Tensor) -> Tensor {
    let data: Vec<f64> = a.data_ref().iter().map(|x| x.max(0.0)).collect();
    Tensor::derived(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|g, _out, parents, sink| {
            if parents[0].requires_grad() {
                let av = parents[0].data_ref();
                sink(
                    0,
                    g.iter()
                        .zip(av.iter())
                        .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                        .collect(),
                );
            }
        }),
    )
}

/// Log-softmax over a 1-D tensor.
pub fn log_softmax(a: &Tensor) -> Tensor {
    assert_eq!(a.shape().len(), 1, "log_softmax expects a vector");
    let data: Vec<f64> = {
        let av = a.data_ref();
        let hi = av.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = hi + av.iter().map(|x| (x - hi).exp()).sum::<f64>().ln();
        av.iter().map(|x| x - lse).collect()
    };
    Tensor::derived(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|g, out, parents, sink| {
            if parents[0].requires_grad() {
                let total: f64 = g.iter().sum();
                sink(
                    0,
                    g.iter()
                        .zip(out.iter())
                        .map(|(gi, y)| gi - y.exp() * total)
                        .collect(),
                );
            }
        }),
    )
}

pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape().len(), 1);
    assert_eq!(b.shape().len(), 1);
    let (an, bn) = (a.numel(), b.numel());
    let mut data = Vec::with_capacity(an + bn);
    data.extend_from_slice(&a.data_ref());
    data.extend_from_slice(&b.data_ref());
    Tensor::derived(
        vec![an + bn],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _out, parents, sink| {
            if parents[0].requires_grad() {
                sink(0, g[..an].to_vec());
            }
            if parents[1].requires_grad() {
                sink(1, g[an..].to_vec());
            }
        }),
    )
}

/// Contiguous slice of a vector tensor.
pub fn slice(a: &Tensor, start: usize, len: usize) -> Tensor {
    assert_eq!(a.shape().len(), 1, "slice expects a vector");
    assert!(start + len <= a.numel(), "slice out of range");
    let data = a.data_ref()[start..start + len].to_vec();
    let total = a.numel();
    Tensor::derived(
        vec![len],
        data,
        vec![a.clone()],
        Box::new(move |g, _out, parents, sink| {
            if parents[0].requires_grad() {
                let mut d = vec![0.0; total];
                d[start..start + len].copy_from_slice(g);
                sink(0, d);
            }
        }),
    )
}

pub fn sum(a: &Tensor) -> Tensor {
    let total: f64 = a.data_ref().iter().sum();
    let n = a.numel();
    Tensor::derived(
        vec![1],
        vec![total],
        vec![a.clone()],
        Box::new(move |g, _out, parents, sink| {
            if parents[0].requires_grad() {
                sink(0, vec![g[0]; n]);
            }
        }),
    )
}

pub fn mean(a: &Tensor) -> Tensor {
    let n = a.numel();
    affine(&sum(a), 1.0 / n as f64, 0.0)
}

pub fn dot(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "dot");
    sum(&mul(a, b))
}

/// Alignment loss over a sequence of per-frame log-probability rows (each
/// already normalized, e.g. by [`log_softmax`]). Scalar output; backward
/// distributes `-occupancy` into each row.
pub fn ctc_loss_node(
    rows: &[Tensor],
    target: &LabelSequence,
    mode: CollapseMode,
    blank: Option<usize>,
) -> Result<Tensor, TensorError> {
    if rows.is_empty() {
        return Err(TensorError::ShapeError("ctc over zero frames".into()));
    }
    let v = rows[0].numel();
    let log_rows: Vec<Vec<f64>> = rows.iter().map(|r| r.values()).collect();
    for (i, r) in log_rows.iter().enumerate() {
        if r.len() != v {
            return Err(TensorError::ShapeError(format!(
                "ctc row {i} has {} entries, expected {v}",
                r.len()
            )));
        }
    }
    let posts = PosteriorSequence::from_log_probs(&log_rows, blank)?;
    let (outcome, q) = ctc::ctc_occupancy(&posts, target, mode)?;
    let t = rows.len();
    Ok(Tensor::derived(
        vec![1],
        vec![outcome.loss],
        rows.to_vec(),
        Box::new(move |g, _out, parents, sink| {
            for (ti, parent) in parents.iter().enumerate().take(t) {
                if parent.requires_grad() {
                    sink(
                        ti,
                        q[ti * v..(ti + 1) * v]
                            .iter()
                            .map(|qi| -qi * g[0])
                            .collect(),
                    );
                }
            }
        }),
    ))
}

/// Adam with bias correction. Learning-rate and batch conventions follow the
/// training loop in `cloud`; moments shape-match their parameters.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    slots: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            slots: params
                .iter()
                .map(|p| {
                    let n = p.numel();
                    (vec![0.0; n], vec![0.0; n])
                })
                .collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the gradients currently held by `params`.
    /// Does not clear the gradients; callers zero them per batch.
    pub fn step(&mut self, params: &[Tensor]) {
        assert_eq!(params.len(), self.slots.len(), "optimizer/param mismatch");
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (p, (m, v)) in params.iter().zip(self.slots.iter_mut()) {
            let g = p.grad();
            let mut data = p.values();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.set_values(&data);
        }
    }
}
