//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional array node in a computation
//! graph. Operations on tensors record backward rules; [`backward`] replays
//! them in reverse creation order and accumulates gradients into every
//! `requires_grad` leaf. Graphs are confined to one thread (nodes are `Rc`);
//! independent threads build independent graphs.
//!
//! Precision is configurable per tensor: `F64` computes in native doubles,
//! `F32` rounds every op result (and gradient accumulation) through `f32`,
//! which is the cheap training mode. All gradient checks run at `F64`.

mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRng;

/// Numeric precision of a tensor's buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Precision::F64 => v,
            Precision::F32 => v as f32 as f64,
        }
    }

    pub fn quantize_slice(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    fn combine(a: Precision, b: Precision) -> Precision {
        if a == Precision::F32 || b == Precision::F32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }
}

thread_local! {
    static NEXT_NODE_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_node_id() -> u64 {
    NEXT_NODE_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule: given the upstream gradient and the output node, compute
/// and accumulate gradient contributions into the node's parents.
type BackwardFn = Box<dyn Fn(&[f64], &Node)>;

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
    requires_grad: bool,
    op: &'static str,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Handle to a node in the computation graph. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::contract(format!(
            "shape {shape:?} implies {numel} elements, buffer has {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    /// Constant leaf (does not receive gradients).
    pub fn from_vec(shape: &[usize], data: Vec<f64>, precision: Precision) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, precision, false))
    }

    /// Trainable leaf (receives gradients on backward).
    pub fn param(shape: &[usize], data: Vec<f64>, precision: Precision) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, precision, true))
    }

    pub fn scalar(v: f64, precision: Precision) -> Tensor {
        Self::leaf(vec![1], vec![v], precision, false)
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Tensor {
        let numel = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![0.0; numel], precision, false)
    }

    pub fn filled(shape: &[usize], v: f64, precision: Precision) -> Tensor {
        let numel = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![v; numel], precision, false)
    }

    fn leaf(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision, requires_grad: bool) -> Tensor {
        precision.quantize_slice(&mut data);
        Tensor(Rc::new(Node {
            id: next_node_id(),
            shape,
            data,
            precision,
            requires_grad,
            op: "leaf",
            parents: Vec::new(),
            backward: None,
            grad: RefCell::new(None),
        }))
    }

    /// Record an op result. If no parent participates in gradients the node
    /// is stored leaf-like (no parents, no rule), which keeps inference
    /// graphs from retaining history.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        mut data: Vec<f64>,
        parents: Vec<Tensor>,
        op: &'static str,
        backward: BackwardFn,
    ) -> Tensor {
        let precision = parents
            .iter()
            .map(|p| p.precision())
            .fold(Precision::F64, Precision::combine);
        precision.quantize_slice(&mut data);
        debug_assert!(
            data.iter().all(|v| !v.is_nan()),
            "op {op} produced NaN from finite inputs"
        );
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            id: next_node_id(),
            shape,
            data,
            precision,
            requires_grad,
            op,
            parents,
            backward,
            grad: RefCell::new(None),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn precision(&self) -> Precision {
        self.0.precision
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        if !self.0.requires_grad {
            return;
        }
        debug_assert_eq!(contrib.len(), self.numel());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi = self.0.precision.quantize(*gi + ci);
                }
            }
            None => {
                let mut g = contrib.to_vec();
                self.0.precision.quantize_slice(&mut g);
                *slot = Some(g);
            }
        }
    }

    /// Leading dimensions before the trailing `keep` axes.
    pub(crate) fn leading_dims(&self, keep: usize) -> &[usize] {
        &self.0.shape[..self.0.shape.len() - keep]
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.0.op)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Every differentiable op name the graph can record. The gradient-check
/// suite is required to cover each entry; a coverage test compares recorded
/// tapes against this list.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "matmul",
    "matmul_tb",
    "add",
    "add_bias",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "relu",
    "cumsum",
    "layer_norm",
    "dropout",
    "masked_softmax",
    "sum_all",
    "sum_last",
    "mean_all",
    "reshape",
    "embedding",
    "cross_entropy",
    "slice_last",
    "concat_last",
];

/// Topologically ordered view of the graph reachable from a root.
///
/// Node ids increase monotonically at creation and an op's inputs always
/// exist before the op itself, so ascending-id order is a valid topological
/// order equal to recording order.
pub struct Tape {
    nodes: Vec<Tensor>,
}

pub struct TapeEntry {
    pub id: u64,
    pub op: &'static str,
    pub parent_ids: Vec<u64>,
}

impl Tape {
    /// Collect the gradient-relevant subgraph under `root`.
    pub fn trace(root: &Tensor) -> Tape {
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            for p in &t.0.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| t.id());
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn entries(&self) -> Vec<TapeEntry> {
        self.nodes
            .iter()
            .map(|t| TapeEntry {
                id: t.id(),
                op: t.op_name(),
                parent_ids: t.0.parents.iter().map(|p| p.id()).collect(),
            })
            .collect()
    }

    /// Distinct op names recorded on this tape (excluding leaves).
    pub fn recorded_ops(&self) -> Vec<&'static str> {
        let mut ops: Vec<&'static str> = self
            .nodes
            .iter()
            .map(|t| t.op_name())
            .filter(|op| *op != "leaf")
            .collect();
        ops.sort_unstable();
        ops.dedup();
        ops
    }
}

/// Reverse-mode sweep from a scalar loss. Every `requires_grad` leaf in the
/// reachable graph receives `d loss / d leaf`; repeated use of a tensor sums
/// contributions.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(Error::contract(
            "backward on a tensor with no gradient path to any parameter".to_string(),
        ));
    }
    let tape = Tape::trace(loss);
    loss.accumulate_grad(&[1.0]);
    for node in tape.nodes.iter().rev() {
        let Some(rule) = node.0.backward.as_ref() else {
            continue;
        };
        let upstream = match node.0.grad.borrow().as_ref() {
            Some(g) => g.clone(),
            None => continue,
        };
        rule(&upstream, &node.0);
    }
    Ok(())
}

/// Central-difference step used by the gradient checker.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Check analytic gradients of a scalar-valued tensor function against
/// central finite differences at 64-bit. Returns the maximum relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over every
/// element of every input.
pub fn grad_check<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    grad_check_elements(f, inputs, None)
}

/// Like [`grad_check`] but probing only `samples` random elements per input,
/// for large parameter sets where full finite differencing is infeasible.
pub fn grad_check_sampled<F>(f: &F, inputs: &[Tensor], samples: usize, rng: &mut SeedRng) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            if t.numel() <= samples {
                (0..t.numel()).collect()
            } else {
                let mut idx: Vec<usize> = (0..t.numel()).collect();
                rng.shuffle(&mut idx);
                idx.truncate(samples);
                idx
            }
        })
        .collect();
    grad_check_elements(f, inputs, Some(&picks))
}

fn grad_check_elements<F>(f: &F, inputs: &[Tensor], picks: Option<&[Vec<usize>]>) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let fresh: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.shape(), t.data().to_vec(), Precision::F64))
        .collect::<Result<_>>()?;
    let loss = f(&fresh)?;
    if loss.numel() != 1 {
        return Err(Error::contract("grad_check requires a scalar-valued function".to_string()));
    }
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = fresh
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let h = GRAD_CHECK_STEP;
    let mut max_rel = 0.0f64;
    for (i, base) in inputs.iter().enumerate() {
        let all: Vec<usize>;
        let elements: &[usize] = match picks {
            Some(p) => &p[i],
            None => {
                all = (0..base.numel()).collect();
                &all
            }
        };
        for &e in elements {
            let eval = |delta: f64| -> Result<f64> {
                let probed: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut data = t.data().to_vec();
                        if j == i {
                            data[e] += delta;
                        }
                        Tensor::param(t.shape(), data, Precision::F64)
                    })
                    .collect::<Result<_>>()?;
                Ok(f(&probed)?.item())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let a = analytic[i][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::param(shape, data, Precision::F64).unwrap()
    }

    #[test]
    fn loss_sum_grad_is_ones() {
        let x = p(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let loss = x.sum_all();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn reuse_accumulates_by_sum() {
        let x = p(&[3], vec![1.0, 2.0, 3.0]);
        let y = x.add(&x).unwrap();
        let loss = y.sum_all();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = p(&[2], vec![1.0, 2.0]);
        let y = x.scale(2.0);
        let err = backward(&y).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn tape_is_topologically_ordered_and_deduplicated() {
        let x = p(&[2], vec![1.0, 2.0]);
        let y = x.sigmoid();
        let z = y.mul(&y).unwrap();
        let loss = z.sum_all();
        let tape = Tape::trace(&loss);
        let entries = tape.entries();
        // Parents appear before children.
        for (pos, e) in entries.iter().enumerate() {
            for pid in &e.parent_ids {
                let ppos = entries.iter().position(|o| o.id == *pid);
                if let Some(ppos) = ppos {
                    assert!(ppos < pos, "parent {pid} after child {}", e.id);
                }
            }
        }
        // Each node once, even though y is used twice.
        let mut ids: Vec<u64> = entries.iter().map(|e| e.id).collect();
        let before = ids.len();
        ids.dedup();
        assert_eq!(before, ids.len());
        assert_eq!(before, 4); // leaf, sigmoid, mul, sum_all
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let x = p(&[5], vec![0.3, -0.2, 0.9, 1.4, -1.1]);
            let y = x.sigmoid().mul(&x.relu()).unwrap();
            let loss = y.sum_all();
            backward(&loss).unwrap();
            x.grad().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_quadratic_exact() {
        // f(x) = sum(x^2): analytic grad [2, 4].
        let x = p(&[2], vec![1.0, 2.0]);
        let f = |inp: &[Tensor]| -> Result<Tensor> { Ok(inp[0].mul(&inp[0])?.sum_all()) };
        let err = grad_check(&f, &[x.clone()]).unwrap();
        assert!(err < 1e-8, "max rel err {err}");
        let loss = x.mul(&x).unwrap().sum_all();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn grad_check_flags_broken_backward() {
        // A sigmoid with a sign-flipped backward rule must be caught by the
        // harness with a large error.
        let broken_sigmoid = |x: &Tensor| -> Tensor {
            let data: Vec<f64> = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
            Tensor::from_op(
                x.shape().to_vec(),
                data,
                vec![x.clone()],
                "sigmoid",
                Box::new(|upstream, node| {
                    let y = &node.data;
                    let contrib: Vec<f64> = upstream
                        .iter()
                        .zip(y)
                        .map(|(g, yi)| -g * yi * (1.0 - yi)) // wrong sign
                        .collect();
                    node.parents[0].accumulate_grad(&contrib);
                }),
            )
        };
        let f = move |inp: &[Tensor]| -> Result<Tensor> { Ok(broken_sigmoid(&inp[0]).sum_all()) };
        let x = p(&[3], vec![0.3, -0.4, 1.2]);
        let err = grad_check(&f, &[x]).unwrap();
        assert!(err > 1e-2, "harness failed to flag broken rule, err {err}");
    }

    #[test]
    fn f32_precision_rounds_through_f32() {
        let v = 0.1f64;
        let x = Tensor::from_vec(&[1], vec![v], Precision::F32).unwrap();
        assert_eq!(x.data()[0], 0.1f32 as f64);
        let y = x.scale(3.0);
        assert_eq!(y.precision(), Precision::F32);
        assert_eq!(y.data()[0], (0.1f32 as f64 * 3.0) as f32 as f64);
    }

    #[test]
    fn inference_graphs_do_not_retain_history() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0], Precision::F64).unwrap();
        let y = x.sigmoid();
        assert!(!y.requires_grad());
        assert!(y.0.parents.is_empty());
    }
}
