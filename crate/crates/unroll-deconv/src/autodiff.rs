//! Tape-based reverse-mode differentiation over a closed set of grid
//! operations: exactly the ops appearing in the unfolded forward pass and
//! its loss. One tape per training step; a tape is single-threaded by
//! contract, distinct tapes may run in parallel.

use crate::error::{DeconvError, Result};
use crate::grid::{
    conv_same, corr_image, corr_kernel_window, flip180, relu_map, safe_div, sigmoid_map,
    BoundaryMode, Grid,
};
use std::collections::HashMap;

/// A value living on the tape: a grid or a scalar.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Grid(Grid),
    Scalar(f64),
}

impl Value {
    pub fn as_grid(&self) -> Result<&Grid> {
        match self {
            Value::Grid(g) => Ok(g),
            Value::Scalar(_) => Err(DeconvError::Autodiff("expected grid value".into())),
        }
    }

    pub fn as_scalar(&self) -> Result<f64> {
        match self {
            Value::Scalar(s) => Ok(*s),
            Value::Grid(_) => Err(DeconvError::Autodiff("expected scalar value".into())),
        }
    }

    fn zeros_like(&self) -> Value {
        match self {
            Value::Grid(g) => Value::Grid(Grid::zeros(g.rows(), g.cols())),
            Value::Scalar(_) => Value::Scalar(0.0),
        }
    }

    fn accumulate(&mut self, other: &Value) -> Result<()> {
        match (self, other) {
            (Value::Grid(a), Value::Grid(b)) => {
                *a = a.add(b)?;
                Ok(())
            }
            (Value::Scalar(a), Value::Scalar(b)) => {
                *a += b;
                Ok(())
            }
            _ => Err(DeconvError::Autodiff(
                "adjoint kind mismatch during accumulation".into(),
            )),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Value::Grid(g) => g.is_finite(),
            Value::Scalar(s) => s.is_finite(),
        }
    }
}

/// Operations the tape can record, each with a local gradient rule.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Leaf,
    ConvSame(BoundaryMode),
    CorrKernelWindow(BoundaryMode, (usize, usize)),
    Flip180,
    /// Elementwise num / (den + eps). eps = 0 is permitted on-tape for
    /// divisions with provably positive denominators (the SSIM ratios).
    SafeDiv(f64),
    Hadamard,
    Add,
    Sub,
    ReLU,
    Sigmoid,
    Abs,
    SumAll,
    MeanAll,
    ScalarMul(f64),
    TvPenalty,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: OpKind,
    pub inputs: Vec<usize>,
    pub value: Value,
}

/// Append-only computation record. Node inputs always have smaller ids.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, g: Grid) -> usize {
        self.push(OpKind::Leaf, vec![], Value::Grid(g))
    }

    pub fn value(&self, id: usize) -> &Value {
        &self.nodes[id].value
    }

    /// Read-only view of all recorded nodes, for inspection and audits.
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn grid(&self, id: usize) -> Result<&Grid> {
        self.nodes[id].value.as_grid()
    }

    pub fn scalar(&self, id: usize) -> Result<f64> {
        self.nodes[id].value.as_scalar()
    }

    fn push(&mut self, op: OpKind, inputs: Vec<usize>, value: Value) -> usize {
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    fn input_grid(&self, id: usize) -> Result<&Grid> {
        self.nodes
            .get(id)
            .ok_or_else(|| DeconvError::Autodiff(format!("dangling node id {id}")))?
            .value
            .as_grid()
    }

    /// Records `op` over existing nodes, computing the forward value.
    pub fn record(&mut self, op: OpKind, inputs: &[usize]) -> Result<usize> {
        for &id in inputs {
            if id >= self.nodes.len() {
                return Err(DeconvError::Autodiff(format!("dangling node id {id}")));
            }
        }
        let arity_err = |want: usize| {
            DeconvError::Autodiff(format!("op expects {want} inputs, got {}", inputs.len()))
        };
        let value = match &op {
            OpKind::Leaf => {
                return Err(DeconvError::Autodiff(
                    "use Tape::leaf to introduce leaves".into(),
                ))
            }
            OpKind::ConvSame(mode) => {
                let [img, ker] = *<&[usize; 2]>::try_from(inputs).map_err(|_| arity_err(2))?;
                Value::Grid(conv_same(self.input_grid(img)?, self.input_grid(ker)?, *mode)?)
            }
            OpKind::CorrKernelWindow(mode, kshape) => {
                let [ratio, img] = *<&[usize; 2]>::try_from(inputs).map_err(|_| arity_err(2))?;
                Value::Grid(corr_kernel_window(
                    self.input_grid(ratio)?,
                    self.input_grid(img)?,
                    *kshape,
                    *mode,
                )?)
            }
            OpKind::Flip180 => {
                let [a] = *<&[usize; 1]>::try_from(inputs).map_err(|_| arity_err(1))?;
                Value::Grid(flip180(self.input_grid(a)?))
            }
            OpKind::SafeDiv(eps) => {
                let [n, d] = *<&[usize; 2]>::try_from(inputs).map_err(|_| arity_err(2))?;
                Value::Grid(safe_div(self.input_grid(n)?, self.input_grid(d)?, *eps)?)
            }
            OpKind::Hadamard => {
                let [a, b] = *<&[usize; 2]>::try_from(inputs).map_err(|_| arity_err(2))?;
                Value::Grid(self.input_grid(a)?.hadamard(self.input_grid(b)?)?)
            }
            OpKind::Add | OpKind::Sub => {
                let [a, b] = *<&[usize; 2]>::try_from(inputs).map_err(|_| arity_err(2))?;
                let sign = if matches!(op, OpKind::Add) { 1.0 } else { -1.0 };
                match (&self.nodes[a].value, &self.nodes[b].value) {
                    (Value::Grid(x), Value::Grid(y)) => {
                        Value::Grid(x.zip_map(y, |p, q| p + sign * q)?)
                    }
                    (Value::Scalar(x), Value::Scalar(y)) => Value::Scalar(x + sign * y),
                    _ => {
                        return Err(DeconvError::Autodiff(
                            "add/sub operands must both be grids or both scalars".into(),
                        ))
                    }
                }
            }
            OpKind::ReLU => {
                let [a] = *<&[usize; 1]>::try_from(inputs).map_err(|_| arity_err(1))?;
                Value::Grid(relu_map(self.input_grid(a)?))
            }
            OpKind::Sigmoid => {
                let [a] = *<&[usize; 1]>::try_from(inputs).map_err(|_| arity_err(1))?;
                Value::Grid(sigmoid_map(self.input_grid(a)?))
            }
            OpKind::Abs => {
                let [a] = *<&[usize; 1]>::try_from(inputs).map_err(|_| arity_err(1))?;
                Value::Grid(self.input_grid(a)?.map(f64::abs))
            }
            OpKind::SumAll => {
                let [a] = *<&[usize; 1]>::try_from(inputs).map_err(|_| arity_err(1))?;
                Value::Scalar(self.input_grid(a)?.sum())
            }
            OpKind::MeanAll => {
                let [a] = *<&[usize; 1]>::try_from(inputs).map_err(|_| arity_err(1))?;
                Value::Scalar(self.input_grid(a)?.mean())
            }
            OpKind::ScalarMul(c) => {
                let [a] = *<&[usize; 1]>::try_from(inputs).map_err(|_| arity_err(1))?;
                match &self.nodes[a].value {
                    Value::Grid(g) => Value::Grid(g.scale(*c)),
                    Value::Scalar(s) => Value::Scalar(c * s),
                }
            }
            OpKind::TvPenalty => {
                let [a] = *<&[usize; 1]>::try_from(inputs).map_err(|_| arity_err(1))?;
                Value::Scalar(tv_forward(self.input_grid(a)?))
            }
        };
        Ok(self.push(op, inputs.to_vec(), value))
    }

    /// Reverse sweep from a scalar loss node; returns gradients for every
    /// Leaf node, keyed by node id. Identical inputs yield bitwise
    /// identical gradients.
    pub fn backward(&self, loss_id: usize) -> Result<HashMap<usize, Value>> {
        let loss = self
            .nodes
            .get(loss_id)
            .ok_or_else(|| DeconvError::Autodiff(format!("dangling node id {loss_id}")))?;
        if !matches!(loss.value, Value::Scalar(_)) {
            return Err(DeconvError::Autodiff(
                "backward requires a scalar loss node".into(),
            ));
        }
        if !loss.value.is_finite() {
            return Err(DeconvError::Autodiff("loss value is not finite".into()));
        }

        let mut adjoints: Vec<Value> = self.nodes.iter().map(|n| n.value.zeros_like()).collect();
        adjoints[loss_id] = Value::Scalar(1.0);

        for id in (0..=loss_id).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, OpKind::Leaf) {
                continue;
            }
            let adj = adjoints[id].clone();
            let contributions = self.local_grads(node, &adj)?;
            for (input_id, contrib) in node.inputs.iter().zip(contributions) {
                adjoints[*input_id].accumulate(&contrib)?;
            }
        }

        let mut grads = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, OpKind::Leaf) {
                grads.insert(id, adjoints[id].clone());
            }
        }
        Ok(grads)
    }

    /// Per-input adjoint contributions of one node given its own adjoint.
    fn local_grads(&self, node: &Node, adj: &Value) -> Result<Vec<Value>> {
        let g = |id: usize| self.nodes[id].value.as_grid();
        Ok(match &node.op {
            OpKind::Leaf => vec![],
            OpKind::ConvSame(mode) => {
                let adj = adj.as_grid()?;
                let img = g(node.inputs[0])?;
                let ker = g(node.inputs[1])?;
                let d_img = corr_image(adj, ker, *mode)?;
                let d_ker = corr_kernel_window(adj, img, ker.shape(), *mode)?;
                vec![Value::Grid(d_img), Value::Grid(d_ker)]
            }
            OpKind::CorrKernelWindow(mode, _) => {
                let adj = adj.as_grid()?;
                let ratio = g(node.inputs[0])?;
                let img = g(node.inputs[1])?;
                let d_ratio = conv_same(img, adj, *mode)?;
                let d_img = corr_image(ratio, adj, *mode)?;
                vec![Value::Grid(d_ratio), Value::Grid(d_img)]
            }
            OpKind::Flip180 => vec![Value::Grid(flip180(adj.as_grid()?))],
            OpKind::SafeDiv(eps) => {
                let adj = adj.as_grid()?;
                let num = g(node.inputs[0])?;
                let den = g(node.inputs[1])?;
                let d_num = adj.zip_map(den, |a, d| a / (d + eps))?;
                let d_den = adj
                    .zip_map(num, |a, n| a * n)?
                    .zip_map(den, |an, d| -an / ((d + eps) * (d + eps)))?;
                vec![Value::Grid(d_num), Value::Grid(d_den)]
            }
            OpKind::Hadamard => {
                let adj = adj.as_grid()?;
                let a = g(node.inputs[0])?;
                let b = g(node.inputs[1])?;
                vec![Value::Grid(adj.hadamard(b)?), Value::Grid(adj.hadamard(a)?)]
            }
            OpKind::Add => vec![adj.clone(), adj.clone()],
            OpKind::Sub => {
                let neg = match adj {
                    Value::Grid(a) => Value::Grid(a.scale(-1.0)),
                    Value::Scalar(s) => Value::Scalar(-s),
                };
                vec![adj.clone(), neg]
            }
            OpKind::ReLU => {
                // subgradient at exactly 0 is 0
                let adj = adj.as_grid()?;
                let x = g(node.inputs[0])?;
                vec![Value::Grid(
                    adj.zip_map(x, |a, v| if v > 0.0 { a } else { 0.0 })?,
                )]
            }
            OpKind::Sigmoid => {
                let adj = adj.as_grid()?;
                let s = node.value.as_grid()?;
                vec![Value::Grid(adj.zip_map(s, |a, s| a * s * (1.0 - s))?)]
            }
            OpKind::Abs => {
                // subgradient at exactly 0 is 0
                let adj = adj.as_grid()?;
                let x = g(node.inputs[0])?;
                vec![Value::Grid(adj.zip_map(x, |a, v| a * sign0(v))?)]
            }
            OpKind::SumAll => {
                let a = adj.as_scalar()?;
                let x = g(node.inputs[0])?;
                vec![Value::Grid(Grid::filled(x.rows(), x.cols(), a))]
            }
            OpKind::MeanAll => {
                let a = adj.as_scalar()?;
                let x = g(node.inputs[0])?;
                vec![Value::Grid(Grid::filled(
                    x.rows(),
                    x.cols(),
                    a / x.len() as f64,
                ))]
            }
            OpKind::ScalarMul(c) => vec![match adj {
                Value::Grid(a) => Value::Grid(a.scale(*c)),
                Value::Scalar(s) => Value::Scalar(c * s),
            }],
            OpKind::TvPenalty => {
                let a = adj.as_scalar()?;
                let x = g(node.inputs[0])?;
                vec![Value::Grid(tv_backward(x, a))]
            }
        })
    }
}

#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Anisotropic total variation over in-range forward differences.
pub(crate) fn tv_forward(x: &Grid) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            if i + 1 < x.rows() {
                total += (x.get(i + 1, j) - x.get(i, j)).abs();
            }
            if j + 1 < x.cols() {
                total += (x.get(i, j + 1) - x.get(i, j)).abs();
            }
        }
    }
    total
}

fn tv_backward(x: &Grid, adj: f64) -> Grid {
    let mut grad = Grid::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            if i + 1 < x.rows() {
                let s = sign0(x.get(i + 1, j) - x.get(i, j)) * adj;
                grad.set(i + 1, j, grad.get(i + 1, j) + s);
                grad.set(i, j, grad.get(i, j) - s);
            }
            if j + 1 < x.cols() {
                let s = sign0(x.get(i, j + 1) - x.get(i, j)) * adj;
                grad.set(i, j + 1, grad.get(i, j + 1) + s);
                grad.set(i, j, grad.get(i, j) - s);
            }
        }
    }
    grad
}

/// Central finite-difference check of [`Tape::backward`].
///
/// `builder` must deterministically produce a tape, the scalar loss id,
/// and the leaf ids bound to `params` (same order). Returns the worst
/// relative error, with the denominator floored at 1.
pub fn grad_check<F>(builder: F, params: &[Grid], step: f64) -> Result<f64>
where
    F: Fn(&[Grid]) -> Result<(Tape, usize, Vec<usize>)>,
{
    if step <= 0.0 {
        return Err(DeconvError::InvalidArgument("step must be positive".into()));
    }
    let (tape, loss_id, leaf_ids) = builder(params)?;
    if !tape.scalar(loss_id)?.is_finite() {
        return Err(DeconvError::Autodiff("non-finite loss in grad_check".into()));
    }
    let grads = tape.backward(loss_id)?;

    let eval = |params: &[Grid]| -> Result<f64> {
        let (tape, loss_id, _) = builder(params)?;
        let loss = tape.scalar(loss_id)?;
        if !loss.is_finite() {
            return Err(DeconvError::Autodiff("non-finite loss in grad_check".into()));
        }
        Ok(loss)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Grid> = params.to_vec();
    for (p_idx, leaf_id) in leaf_ids.iter().enumerate() {
        let analytic = grads
            .get(leaf_id)
            .ok_or_else(|| DeconvError::Autodiff(format!("no gradient for leaf {leaf_id}")))?
            .as_grid()?
            .clone();
        for e in 0..params[p_idx].len() {
            let orig = work[p_idx].values()[e];
            work[p_idx].values_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[p_idx].values_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[p_idx].values_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let rel = (analytic.values()[e] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
