//! Define-by-run reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its output tensor, so values are
//! available immediately after each call (the model uses this to pick spline
//! bins from freshly computed knots). `backward` walks the node list in
//! reverse and accumulates gradients additively into the named parameter
//! leaves; parameters that do not reach the loss receive zero gradients.
//!
//! Numerical policy: every forward result is checked for non-finite values
//! and the step is aborted with an error naming the operation that produced
//! them. `log` and `sqrt` reject out-of-domain inputs before evaluating.
//!
//! The tape is rebuilt for every batch. Identical inputs and identical
//! construction order produce bit-identical forward values and gradients in
//! a single-threaded run: iteration order is fixed everywhere and no hashing
//! is involved.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gradcore::linalg;
use crate::gradcore::params::ParamStore;
use crate::gradcore::tensor::{dims2, Tensor};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Sin(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Tanh(NodeId),
    SoftmaxMasked { input: NodeId, mask: Vec<bool> },
    Logsumexp(NodeId),
    GatherRows { input: NodeId, rows: Vec<usize> },
    GatherCols { input: NodeId, cols: Vec<usize> },
    GatherElem { input: NodeId, cols: Vec<usize> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Reshape(NodeId),
    Transpose(NodeId),
    CholLogdet(NodeId),
    CholSolve { a: NodeId, b: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Matmul(..) => "matmul",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Sin(..) => "sin",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Tanh(..) => "tanh",
            Op::SoftmaxMasked { .. } => "softmax_masked",
            Op::Logsumexp(..) => "logsumexp",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherCols { .. } => "gather_cols",
            Op::GatherElem { .. } => "gather_elem",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::CholLogdet(..) => "chol_logdet",
            Op::CholSolve { .. } => "chol_solve",
        }
    }
}

/// Saved forward-pass state a backward rule needs beyond input/output values.
#[derive(Clone, Debug)]
enum Aux {
    CholFactor(Tensor),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    aux: Option<Aux>,
}

/// Broadcasting accepted by the elementwise binary ops: identical shapes,
/// either side a scalar, or a row vector (`[c]` / `[1, c]`) broadcast over
/// the rows of a `[r, c]` matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
    RhsRow,
}

fn broadcast_kind(a: &[usize], b: &[usize], op: &str) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    if bn == 1 {
        return Ok(Broadcast::RhsScalar);
    }
    if an == 1 {
        return Ok(Broadcast::LhsScalar);
    }
    if let [_, c] = a {
        if b == [*c] || b == [1, *c] {
            return Ok(Broadcast::RhsRow);
        }
    }
    Err(Error::Contract(format!("{op}: shapes {a:?} and {b:?} do not broadcast")))
}

pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn check(&self, id: NodeId, role: &str) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::Contract(format!("{role}: node id {id} out of range")));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Option<Aux>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by op '{}'",
                op.name()
            )));
        }
        self.nodes.push(Node { op, value, aux });
        Ok(self.nodes.len() - 1)
    }

    /// Leaf holding a constant (non-trainable) tensor.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value, None)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf holding a named trainable parameter. Gradients from `backward`
    /// are keyed by these names. Names must be unique per tape.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("parameter '{name}' registered twice")));
        }
        let id = self.push(Op::Leaf, value, None)?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Register every tensor of a parameter store as a trainable leaf, in
    /// the store's (sorted) iteration order.
    pub fn register(&mut self, store: &ParamStore) -> Result<BTreeMap<String, NodeId>> {
        let mut ids = BTreeMap::new();
        for (name, tensor) in store.iter() {
            let id = self.param(name, tensor.clone())?;
            ids.insert(name.clone(), id);
        }
        Ok(ids)
    }

    // ----- elementwise binary ops -----

    fn binary(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.check(a, op.name())?;
        self.check(b, op.name())?;
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let kind = broadcast_kind(av.shape(), bv.shape(), op.name())?;
        let (ad, bd) = (av.data(), bv.data());
        let (shape, data) = match kind {
            Broadcast::Same => (
                av.shape().to_vec(),
                ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::RhsScalar => {
                (av.shape().to_vec(), ad.iter().map(|&x| f(x, bd[0])).collect())
            }
            Broadcast::LhsScalar => {
                (bv.shape().to_vec(), bd.iter().map(|&y| f(ad[0], y)).collect())
            }
            Broadcast::RhsRow => {
                let [r, c] = dims2(av)?;
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        out.push(f(ad[i * c + j], bd[j]));
                    }
                }
                (vec![r, c], out)
            }
        };
        self.push(op, Tensor::new(shape, data)?, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }

    /// Multiply by a host-side constant scalar.
    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let c = self.constant_scalar(k)?;
        self.mul(a, c)
    }

    /// Add a host-side constant scalar.
    pub fn add_const(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let c = self.constant_scalar(k)?;
        self.add(a, c)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    // ----- matmul and structure ops -----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let value = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        self.push(Op::Matmul(a, b), value, None)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "transpose")?;
        let value = self.nodes[a].value.transpose2()?;
        self.push(Op::Transpose(a), value, None)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check(a, "reshape")?;
        let v = &self.nodes[a].value;
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::Contract(format!(
                "reshape: {:?} has {} elements, target {:?} has {}",
                v.shape(),
                v.numel(),
                shape,
                numel
            )));
        }
        let value = Tensor::new(shape, v.data().to_vec())?;
        self.push(Op::Reshape(a), value, None)
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.check(a, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::Contract("gather_rows: empty index list".into()));
        }
        let value = self.nodes[a].value.select_rows(rows)?;
        self.push(Op::GatherRows { input: a, rows: rows.to_vec() }, value, None)
    }

    pub fn gather_cols(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        self.check(a, "gather_cols")?;
        if cols.is_empty() {
            return Err(Error::Contract("gather_cols: empty index list".into()));
        }
        let value = self.nodes[a].value.select_cols(cols)?;
        self.push(Op::GatherCols { input: a, cols: cols.to_vec() }, value, None)
    }

    /// Per-row element pick: output `[r, 1]` with `out[i] = a[i, cols[i]]`.
    pub fn gather_elem(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        self.check(a, "gather_elem")?;
        let v = &self.nodes[a].value;
        let [r, c] = dims2(v)?;
        if cols.len() != r {
            return Err(Error::Contract(format!(
                "gather_elem: {} indices for {} rows",
                cols.len(),
                r
            )));
        }
        let mut out = Vec::with_capacity(r);
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(Error::Contract(format!(
                    "gather_elem: column {j} out of range for {c} columns"
                )));
            }
            out.push(v.get2(i, j));
        }
        let value = Tensor::new(vec![r, 1], out)?;
        self.push(Op::GatherElem { input: a, cols: cols.to_vec() }, value, None)
    }

    /// Concatenate along `axis` (0 or 1). Rank-1 inputs concatenate along
    /// axis 0 into a rank-1 output; rank-2 inputs require matching
    /// complementary dimensions.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat: no inputs".into()));
        }
        for &id in inputs {
            self.check(id, "concat")?;
        }
        let first = &self.nodes[inputs[0]].value;
        let value = if first.rank() == 1 {
            if axis != 0 {
                return Err(Error::Contract("concat: rank-1 inputs require axis 0".into()));
            }
            let mut data = Vec::new();
            for &id in inputs {
                let v = &self.nodes[id].value;
                if v.rank() != 1 {
                    return Err(Error::Contract("concat: mixed ranks".into()));
                }
                data.extend_from_slice(v.data());
            }
            let n = data.len();
            Tensor::new(vec![n], data)?
        } else {
            let [_, c0] = dims2(first)?;
            let [r0, _] = dims2(first)?;
            match axis {
                0 => {
                    let mut data = Vec::new();
                    let mut rows = 0;
                    for &id in inputs {
                        let v = &self.nodes[id].value;
                        let [r, c] = dims2(v)?;
                        if c != c0 {
                            return Err(Error::Contract(format!(
                                "concat axis 0: column counts {c0} and {c} differ"
                            )));
                        }
                        rows += r;
                        data.extend_from_slice(v.data());
                    }
                    Tensor::new(vec![rows, c0], data)?
                }
                1 => {
                    let mut cols = 0;
                    for &id in inputs {
                        let v = &self.nodes[id].value;
                        let [r, c] = dims2(v)?;
                        if r != r0 {
                            return Err(Error::Contract(format!(
                                "concat axis 1: row counts {r0} and {r} differ"
                            )));
                        }
                        cols += c;
                    }
                    let mut data = Vec::with_capacity(r0 * cols);
                    for i in 0..r0 {
                        for &id in inputs {
                            let v = &self.nodes[id].value;
                            data.extend_from_slice(v.row_slice(i));
                        }
                    }
                    Tensor::new(vec![r0, cols], data)?
                }
                _ => return Err(Error::Contract(format!("concat: axis {axis} not supported"))),
            }
        };
        self.push(Op::Concat { inputs: inputs.to_vec(), axis }, value, None)
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "sum")?;
        let s: f64 = self.nodes[a].value.data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), None)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "mean")?;
        let v = &self.nodes[a].value;
        if v.numel() == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), None)
    }

    /// Numerically stable log-sum-exp over all elements, producing a scalar.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "logsumexp")?;
        let v = &self.nodes[a].value;
        if v.numel() == 0 {
            return Err(Error::Contract("logsumexp of empty tensor".into()));
        }
        let m = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = v.data().iter().map(|&x| (x - m).exp()).sum();
        self.push(Op::Logsumexp(a), Tensor::scalar(m + s.ln()), None)
    }

    // ----- elementwise unary ops -----

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        self.check(a, op.name())?;
        let v = &self.nodes[a].value;
        let data: Vec<f64> = v.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push(op, value, None)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "log")?;
        if self.nodes[a].value.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        self.unary(Op::Log(a), a, f64::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "sqrt")?;
        if self.nodes[a].value.data().iter().any(|&x| x < 0.0) {
            return Err(Error::Domain("sqrt of negative value".into()));
        }
        self.unary(Op::Sqrt(a), a, f64::sqrt)
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sin(a), a, f64::sin)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid(a), a, stable_sigmoid)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Softplus(a), a, stable_softplus)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    /// Row-wise softmax over a rank-2 tensor with an element mask. Masked
    /// positions get exactly zero weight; each row's unmasked weights sum
    /// to 1. A fully masked row is a contract violation.
    pub fn softmax_masked(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        self.check(a, "softmax_masked")?;
        let v = &self.nodes[a].value;
        let [r, c] = dims2(v)?;
        if mask.len() != r * c {
            return Err(Error::Contract(format!(
                "softmax_masked: mask has {} entries for {} elements",
                mask.len(),
                r * c
            )));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = v.row_slice(i);
            let mrow = &mask[i * c..(i + 1) * c];
            let mut m = f64::NEG_INFINITY;
            for (x, &keep) in row.iter().zip(mrow) {
                if keep && *x > m {
                    m = *x;
                }
            }
            if m == f64::NEG_INFINITY {
                return Err(Error::Contract(format!(
                    "softmax_masked: row {i} fully masked"
                )));
            }
            let mut denom = 0.0;
            for (j, (&x, &keep)) in row.iter().zip(mrow).enumerate() {
                if keep {
                    let e = (x - m).exp();
                    out[i * c + j] = e;
                    denom += e;
                }
            }
            for (j, &keep) in mrow.iter().enumerate() {
                if keep {
                    out[i * c + j] /= denom;
                }
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.push(Op::SoftmaxMasked { input: a, mask: mask.to_vec() }, value, None)
    }

    // ----- symmetric positive definite ops -----

    /// Log-determinant of a symmetric positive definite matrix.
    pub fn chol_logdet(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "chol_logdet")?;
        let factor = linalg::cholesky(&self.nodes[a].value)?;
        let ld = linalg::logdet_from_factor(&factor)?;
        self.push(Op::CholLogdet(a), Tensor::scalar(ld), Some(Aux::CholFactor(factor)))
    }

    /// Solve `A X = B` for symmetric positive definite `A`.
    pub fn chol_solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "chol_solve")?;
        self.check(b, "chol_solve")?;
        let factor = linalg::cholesky(&self.nodes[a].value)?;
        let x = linalg::solve_from_factor(&factor, &self.nodes[b].value)?;
        self.push(Op::CholSolve { a, b }, x, Some(Aux::CholFactor(factor)))
    }

    // ----- backward -----

    /// Reverse-mode gradients of a scalar node with respect to every
    /// registered parameter. Parameters the loss does not depend on get
    /// zero gradients of the parameter's shape. The tape itself is not
    /// mutated, so the call is repeatable.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        self.check(loss, "backward")?;
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_op(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let mut out = BTreeMap::new();
        for (name, &pid) in &self.params {
            let value = &self.nodes[pid].value;
            let data = match grads[pid].take() {
                Some(g) => g,
                None => vec![0.0; value.numel()],
            };
            out.insert(name.clone(), Tensor::new(value.shape().to_vec(), data)?);
        }
        Ok(out)
    }

    fn backward_op(
        &self,
        id: NodeId,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.binary_backward(*a, *b, g, grads, |_, _| (1.0, 1.0))?;
            }
            Op::Sub(a, b) => {
                self.binary_backward(*a, *b, g, grads, |_, _| (1.0, -1.0))?;
            }
            Op::Mul(a, b) => {
                self.binary_backward(*a, *b, g, grads, |x, y| (y, x))?;
            }
            Op::Div(a, b) => {
                self.binary_backward(*a, *b, g, grads, |x, y| (1.0 / y, -x / (y * y)))?;
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let [r, _] = dims2(av)?;
                let [_, c] = dims2(bv)?;
                let gt = Tensor::new(vec![r, c], g.to_vec())?;
                let da = gt.matmul(&bv.transpose2()?)?;
                let db = av.transpose2()?.matmul(&gt)?;
                accumulate(grads, *a, da.data());
                accumulate(grads, *b, db.data());
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.numel();
                let buf = grad_buf(grads, *a, n);
                for v in buf.iter_mut() {
                    *v += g[0];
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel();
                let share = g[0] / n as f64;
                let buf = grad_buf(grads, *a, n);
                for v in buf.iter_mut() {
                    *v += share;
                }
            }
            Op::Exp(a) => self.unary_backward(*a, &node.value, g, grads, |_, y| y)?,
            Op::Log(a) => self.unary_backward(*a, &node.value, g, grads, |x, _| 1.0 / x)?,
            Op::Sqrt(a) => self.unary_backward(*a, &node.value, g, grads, |_, y| 0.5 / y)?,
            Op::Sin(a) => self.unary_backward(*a, &node.value, g, grads, |x, _| x.cos())?,
            Op::Sigmoid(a) => {
                self.unary_backward(*a, &node.value, g, grads, |_, y| y * (1.0 - y))?
            }
            Op::Softplus(a) => {
                self.unary_backward(*a, &node.value, g, grads, |x, _| stable_sigmoid(x))?
            }
            Op::Tanh(a) => self.unary_backward(*a, &node.value, g, grads, |_, y| 1.0 - y * y)?,
            Op::SoftmaxMasked { input, mask } => {
                let y = &node.value;
                let [r, c] = dims2(y)?;
                let buf = grad_buf(grads, *input, r * c);
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        if mask[i * c + j] {
                            dot += g[i * c + j] * y.data()[i * c + j];
                        }
                    }
                    for j in 0..c {
                        if mask[i * c + j] {
                            let idx = i * c + j;
                            buf[idx] += y.data()[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::Logsumexp(a) => {
                let out = node.value.data()[0];
                let av = &self.nodes[*a].value;
                let n = av.numel();
                let buf = grad_buf(grads, *a, n);
                for (slot, &x) in buf.iter_mut().zip(av.data()) {
                    *slot += g[0] * (x - out).exp();
                }
            }
            Op::GatherRows { input, rows } => {
                let [_, c] = dims2(&self.nodes[*input].value)?;
                let n = self.nodes[*input].value.numel();
                let buf = grad_buf(grads, *input, n);
                for (oi, &src) in rows.iter().enumerate() {
                    for j in 0..c {
                        buf[src * c + j] += g[oi * c + j];
                    }
                }
            }
            Op::GatherCols { input, cols } => {
                let [r, c] = dims2(&self.nodes[*input].value)?;
                let buf = grad_buf(grads, *input, r * c);
                let k = cols.len();
                for i in 0..r {
                    for (oj, &src) in cols.iter().enumerate() {
                        buf[i * c + src] += g[i * k + oj];
                    }
                }
            }
            Op::GatherElem { input, cols } => {
                let [_, c] = dims2(&self.nodes[*input].value)?;
                let n = self.nodes[*input].value.numel();
                let buf = grad_buf(grads, *input, n);
                for (i, &j) in cols.iter().enumerate() {
                    buf[i * c + j] += g[i];
                }
            }
            Op::Concat { inputs, axis } => {
                self.concat_backward(inputs, *axis, g, grads)?;
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g);
            }
            Op::Transpose(a) => {
                let [r, c] = dims2(&self.nodes[*a].value)?;
                // Output is [c, r]; map grads back.
                let buf = grad_buf(grads, *a, r * c);
                for i in 0..c {
                    for j in 0..r {
                        buf[j * c + i] += g[i * r + j];
                    }
                }
            }
            Op::CholLogdet(a) => {
                let Some(Aux::CholFactor(l)) = &node.aux else {
                    return Err(Error::Contract("chol_logdet node missing factor".into()));
                };
                let inv = linalg::inverse_from_factor(l)?;
                let scaled: Vec<f64> = inv.data().iter().map(|&x| x * g[0]).collect();
                accumulate(grads, *a, &scaled);
            }
            Op::CholSolve { a, b } => {
                let Some(Aux::CholFactor(l)) = &node.aux else {
                    return Err(Error::Contract("chol_solve node missing factor".into()));
                };
                let x = &node.value;
                let [n, m] = dims2(x)?;
                let gt = Tensor::new(vec![n, m], g.to_vec())?;
                let gb = linalg::solve_from_factor(l, &gt)?;
                accumulate(grads, *b, gb.data());
                let da = gb.matmul(&x.transpose2()?)?;
                let neg: Vec<f64> = da.data().iter().map(|&v| -v).collect();
                accumulate(grads, *a, &neg);
            }
        }
        Ok(())
    }

    fn unary_backward(
        &self,
        a: NodeId,
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        // derivative as a function of (input value, output value)
        d: impl Fn(f64, f64) -> f64,
    ) -> Result<()> {
        let av = &self.nodes[a].value;
        let n = av.numel();
        if g.len() != n {
            return Err(Error::Contract("unary backward: gradient shape mismatch".into()));
        }
        let buf = grad_buf(grads, a, n);
        for i in 0..n {
            buf[i] += g[i] * d(av.data()[i], out.data()[i]);
        }
        Ok(())
    }

    fn binary_backward(
        &self,
        a: NodeId,
        b: NodeId,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        // partial derivatives (d/da, d/db) as functions of the input values
        d: impl Fn(f64, f64) -> (f64, f64),
    ) -> Result<()> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let kind = broadcast_kind(av.shape(), bv.shape(), "backward")?;
        let (ad, bd) = (av.data(), bv.data());
        match kind {
            Broadcast::Same => {
                {
                    let buf = grad_buf(grads, a, ad.len());
                    for i in 0..ad.len() {
                        buf[i] += g[i] * d(ad[i], bd[i]).0;
                    }
                }
                let buf = grad_buf(grads, b, bd.len());
                for i in 0..bd.len() {
                    buf[i] += g[i] * d(ad[i], bd[i]).1;
                }
            }
            Broadcast::RhsScalar => {
                {
                    let buf = grad_buf(grads, a, ad.len());
                    for i in 0..ad.len() {
                        buf[i] += g[i] * d(ad[i], bd[0]).0;
                    }
                }
                let mut acc = 0.0;
                for i in 0..ad.len() {
                    acc += g[i] * d(ad[i], bd[0]).1;
                }
                grad_buf(grads, b, 1)[0] += acc;
            }
            Broadcast::LhsScalar => {
                {
                    let mut acc = 0.0;
                    for i in 0..bd.len() {
                        acc += g[i] * d(ad[0], bd[i]).0;
                    }
                    grad_buf(grads, a, 1)[0] += acc;
                }
                let buf = grad_buf(grads, b, bd.len());
                for i in 0..bd.len() {
                    buf[i] += g[i] * d(ad[0], bd[i]).1;
                }
            }
            Broadcast::RhsRow => {
                let [r, c] = dims2(av)?;
                {
                    let buf = grad_buf(grads, a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            let idx = i * c + j;
                            buf[idx] += g[idx] * d(ad[idx], bd[j]).0;
                        }
                    }
                }
                let buf = grad_buf(grads, b, c);
                for i in 0..r {
                    for j in 0..c {
                        let idx = i * c + j;
                        buf[j] += g[idx] * d(ad[idx], bd[j]).1;
                    }
                }
            }
        }
        Ok(())
    }

    fn concat_backward(
        &self,
        inputs: &[NodeId],
        axis: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let first = &self.nodes[inputs[0]].value;
        if first.rank() == 1 || axis == 0 {
            let mut offset = 0;
            for &id in inputs {
                let n = self.nodes[id].value.numel();
                let buf = grad_buf(grads, id, n);
                for i in 0..n {
                    buf[i] += g[offset + i];
                }
                offset += n;
            }
        } else {
            // axis 1: interleaved by rows
            let [r, _] = dims2(first)?;
            let total_cols: usize = inputs
                .iter()
                .map(|&id| self.nodes[id].value.shape()[1])
                .sum();
            let mut col_offset = 0;
            for &id in inputs {
                let [_, c] = dims2(&self.nodes[id].value)?;
                let buf = grad_buf(grads, id, r * c);
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[i * total_cols + col_offset + j];
                    }
                }
                col_offset += c;
            }
        }
        Ok(())
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], id: NodeId, n: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; n])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: &[f64]) {
    let buf = grad_buf(grads, id, contribution.len());
    for (slot, &v) in buf.iter_mut().zip(contribution) {
        *slot += v;
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
