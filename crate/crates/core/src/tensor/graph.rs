use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::{Tensor, TensorMap};

/// Argument guard for `log`.
const LOG_FLOOR: f64 = 1e-300;
/// Symmetric clamp applied to sigmoid inputs.
const SIGMOID_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("input `{0}` is not bound")]
    Unbound(String),
    #[error("node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}) produced a non-finite value")]
    Overflow { node: usize, op: &'static str },
    #[error("gradient requested for node {node} with shape {shape:?}; a scalar is required")]
    NotScalar { node: usize, shape: Vec<usize> },
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
}

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Source of input tensors for an evaluation.
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Bindings for TensorMap {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Bindings for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl<B: Bindings + ?Sized> Bindings for &B {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        (**self).lookup(name)
    }
}

/// Layered bindings: the first layer wins.
impl<A: Bindings, B: Bindings> Bindings for (A, B) {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input { name: String, trainable: bool },
    Constant(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Max(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    MatMul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Sum(NodeId),
    SumLast(NodeId),
    Slice { input: NodeId, start: usize, len: usize },
    Concat(Vec<NodeId>),
    Recurrence { drive: NodeId, coeffs: NodeId, init: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Max(..) => "max",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::SumLast(_) => "sum_last",
            Op::Slice { .. } => "slice",
            Op::Concat(_) => "concat",
            Op::Recurrence { .. } => "recurrence",
        }
    }
}

/// A directed acyclic graph of primitive tensor ops.
///
/// Nodes are appended in topological order: every builder method only
/// accepts handles to nodes that already exist. Elementwise binary ops
/// broadcast when one operand's shape is a suffix of the other's (a scalar,
/// or a bias vector repeated over the rows of a matrix). `slice`, `concat`
/// and `sum_last` act on the trailing axis.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    ops: Vec<Op>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Values of every node from one forward pass. Owned by the caller, so
/// several evaluations of the same graph can proceed independently.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    fn leaf(&mut self, name: &str, trainable: bool) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            if let Op::Input { trainable: t, .. } = &mut self.ops[id.0] {
                *t |= trainable;
            }
            return id;
        }
        let id = self.push(Op::Input {
            name: name.to_string(),
            trainable,
        });
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// A trainable leaf. Declaring the same name twice returns the same node.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(name, true)
    }

    /// A non-trainable leaf (observations, noise, masks).
    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, false)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }
    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Max(a, b))
    }
    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a))
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }
    pub fn offset(&mut self, a: NodeId, shift: f64) -> NodeId {
        self.push(Op::Offset(a, shift))
    }
    /// `[m,k]·[k,n]`, `[m,k]·[k]` or `[k]·[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt(a))
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }
    /// Sum of all entries, producing a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }
    /// Sum over the trailing axis.
    pub fn sum_last(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumLast(a))
    }
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice {
            input: a,
            start,
            len,
        })
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    /// Linear recurrence over a sequence:
    /// `y[t] = drive[t] + Σ_j coeffs[j] · y[t − 1 − j]`, where every
    /// `y` before the start equals the scalar `init`.
    pub fn recurrence(&mut self, drive: NodeId, coeffs: NodeId, init: NodeId) -> NodeId {
        self.push(Op::Recurrence {
            drive,
            coeffs,
            init,
        })
    }

    /// Registers a named output reported by [`Graph::forward_eval`].
    pub fn mark_output(&mut self, name: &str, node: NodeId) {
        self.outputs.insert(name.to_string(), node);
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    /// Names of the trainable leaves, sorted.
    pub fn param_names(&self) -> Vec<String> {
        self.inputs
            .iter()
            .filter(|(_, id)| matches!(self.ops[id.0], Op::Input { trainable: true, .. }))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Names of all leaves, sorted.
    pub fn input_names(&self) -> Vec<String> {
        self.inputs.keys().cloned().collect()
    }

    /// Evaluates the named outputs.
    pub fn forward_eval<B: Bindings>(&self, bindings: &B) -> Result<TensorMap, GraphError> {
        let eval = self.forward(bindings)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), eval.values[id.0].clone()))
            .collect())
    }

    /// Evaluates every node.
    pub fn forward<B: Bindings>(&self, bindings: &B) -> Result<Evaluation, GraphError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        for (idx, op) in self.ops.iter().enumerate() {
            let out = eval_op(idx, op, &values, bindings)?;
            if !out.is_finite() {
                return Err(GraphError::Overflow {
                    node: idx,
                    op: op.name(),
                });
            }
            values.push(out);
        }
        Ok(Evaluation { values })
    }

    /// Reverse-mode gradient of the scalar `output` with respect to every
    /// leaf. Leaves that do not influence `output` receive zeros.
    pub fn backward(&self, eval: &Evaluation, output: NodeId) -> Result<TensorMap, GraphError> {
        let values = &eval.values;
        if output.0 >= values.len() {
            return Err(GraphError::UnknownNode(output.0));
        }
        if values[output.0].len() != 1 || values[output.0].rank() > 1 {
            return Err(GraphError::NotScalar {
                node: output.0,
                shape: values[output.0].shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(values[output.0].shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let op = &self.ops[idx];
            if let Op::Input { .. } = op {
                grads[idx] = Some(g);
                continue;
            }
            backprop_op(op, &g, &values[idx], values, &mut grads);
        }

        let mut out = TensorMap::new();
        for (name, id) in &self.inputs {
            let g = if id.0 <= output.0 {
                grads[id.0].take()
            } else {
                None
            };
            let g = g.unwrap_or_else(|| Tensor::zeros(values[id.0].shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Convenience: forward pass plus gradient of `output`.
    pub fn backward_grad<B: Bindings>(
        &self,
        output: NodeId,
        bindings: &B,
    ) -> Result<(f64, TensorMap), GraphError> {
        let eval = self.forward(bindings)?;
        let grads = self.backward(&eval, output)?;
        Ok((eval.value(output).item(), grads))
    }
}

fn shape_err(node: usize, op: &Op, detail: String) -> GraphError {
    GraphError::Shape {
        node,
        op: op.name(),
        detail,
    }
}

/// Output shape for suffix broadcasting, or `None` when incompatible.
fn broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        Some(a.to_vec())
    } else if a.len() >= b.len() && a.ends_with(b) {
        Some(a.to_vec())
    } else if b.len() > a.len() && b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

fn binary(
    idx: usize,
    op: &Op,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, GraphError> {
    let shape = broadcast(a.shape(), b.shape()).ok_or_else(|| {
        shape_err(
            idx,
            op,
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        )
    })?;
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let (na, nb) = (ad.len(), bd.len());
    let data = if na == n && nb == n {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect()
    };
    Ok(Tensor { shape, data })
}

fn lookup<'a>(values: &'a [Tensor], id: NodeId) -> &'a Tensor {
    &values[id.0]
}

fn eval_op<B: Bindings>(
    idx: usize,
    op: &Op,
    values: &[Tensor],
    bindings: &B,
) -> Result<Tensor, GraphError> {
    let v = |id: &NodeId| lookup(values, *id);
    Ok(match op {
        Op::Input { name, .. } => bindings
            .lookup(name)
            .cloned()
            .ok_or_else(|| GraphError::Unbound(name.clone()))?,
        Op::Constant(t) => t.clone(),
        Op::Add(a, b) => binary(idx, op, v(a), v(b), |x, y| x + y)?,
        Op::Sub(a, b) => binary(idx, op, v(a), v(b), |x, y| x - y)?,
        Op::Mul(a, b) => binary(idx, op, v(a), v(b), |x, y| x * y)?,
        Op::Div(a, b) => binary(idx, op, v(a), v(b), |x, y| x / y)?,
        Op::Max(a, b) => binary(idx, op, v(a), v(b), f64::max)?,
        Op::Neg(a) => v(a).map(|x| -x),
        Op::Scale(a, c) => v(a).map(|x| x * c),
        Op::Offset(a, c) => v(a).map(|x| x + c),
        Op::MatMul(a, b) => matmul(idx, op, v(a), v(b))?,
        Op::Tanh(a) => v(a).map(f64::tanh),
        Op::Sigmoid(a) => v(a).map(|x| 1.0 / (1.0 + (-x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP)).exp())),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => v(a).map(|x| x.max(LOG_FLOOR).ln()),
        Op::Sqrt(a) => v(a).map(f64::sqrt),
        Op::Square(a) => v(a).map(|x| x * x),
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::SumLast(a) => {
            let t = v(a);
            let w = t.last_dim();
            let shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
            let data = t.data().chunks(w.max(1)).map(|c| c.iter().sum()).collect();
            Tensor { shape, data }
        }
        Op::Slice { input, start, len } => {
            let t = v(input);
            let w = t.last_dim();
            if t.rank() == 0 || start + len > w {
                return Err(shape_err(
                    idx,
                    op,
                    format!("slice {}..{} of trailing axis {}", start, start + len, w),
                ));
            }
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = *len;
            let data = t
                .data()
                .chunks(w)
                .flat_map(|c| c[*start..start + len].iter().copied())
                .collect();
            Tensor { shape, data }
        }
        Op::Concat(parts) => {
            let first = v(&parts[0]);
            if first.rank() == 0 {
                return Err(shape_err(idx, op, "cannot concatenate scalars".into()));
            }
            let lead = &first.shape()[..first.rank() - 1];
            let rows = first.rows();
            let mut width = 0;
            for p in parts {
                let t = v(p);
                if t.rank() != first.rank() || &t.shape()[..t.rank() - 1] != lead {
                    return Err(shape_err(
                        idx,
                        op,
                        format!("leading dims {:?} vs {:?}", t.shape(), first.shape()),
                    ));
                }
                width += t.last_dim();
            }
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(v(p).row(r));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(width);
            Tensor { shape, data }
        }
        Op::Recurrence { drive, coeffs, init } => {
            let (c, b, y0) = (v(drive), v(coeffs), v(init));
            if c.rank() != 1 || b.rank() != 1 || y0.len() != 1 {
                return Err(shape_err(
                    idx,
                    op,
                    format!("drive {:?}, coeffs {:?}, init {:?}", c.shape(), b.shape(), y0.shape()),
                ));
            }
            let y0 = y0.item();
            let (cd, bd) = (c.data(), b.data());
            let mut y: Vec<f64> = Vec::with_capacity(cd.len());
            for t in 0..cd.len() {
                let mut acc = cd[t];
                for (j, bj) in bd.iter().enumerate() {
                    let prev = if t > j { y[t - 1 - j] } else { y0 };
                    acc += bj * prev;
                }
                y.push(acc);
            }
            Tensor::vector(y)
        }
    })
}

fn matmul(idx: usize, op: &Op, a: &Tensor, b: &Tensor) -> Result<Tensor, GraphError> {
    let mismatch = || shape_err(idx, op, format!("{:?} x {:?}", a.shape(), b.shape()));
    let (m, k, a_vec) = match a.shape() {
        [m, k] => (*m, *k, false),
        [k] => (1, *k, true),
        _ => return Err(mismatch()),
    };
    let (k2, n, b_vec) = match b.shape() {
        [k2, n] => (*k2, *n, false),
        [k2] => (*k2, 1, true),
        _ => return Err(mismatch()),
    };
    if k != k2 || (a_vec && b_vec) {
        return Err(mismatch());
    }
    let mut data = vec![0.0; m * n];
    mm_acc(a.data(), b.data(), &mut data, m, k, n);
    let shape = match (a_vec, b_vec) {
        (false, false) => vec![m, n],
        (false, true) => vec![m],
        (true, false) => vec![n],
        (true, true) => unreachable!(),
    };
    Ok(Tensor { shape, data })
}

/// `out[m,n] += a[m,k] · b[k,n]`
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], contrib: Vec<f64>) {
    match &mut grads[id.0] {
        Some(g) => {
            for (x, c) in g.data.iter_mut().zip(contrib) {
                *x += c;
            }
        }
        slot => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: contrib,
            })
        }
    }
}

/// Reduces a broadcast gradient back onto an operand with `n` entries.
fn reduce_to(g: &[f64], n: usize, weight: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    if g.len() == n {
        for (i, (o, gv)) in out.iter_mut().zip(g).enumerate() {
            *o = gv * weight(i);
        }
    } else {
        for (i, gv) in g.iter().enumerate() {
            out[i % n] += gv * weight(i);
        }
    }
    out
}

fn unary(grads: &mut [Option<Tensor>], values: &[Tensor], a: NodeId, contrib: Vec<f64>) {
    let shape = values[a.0].shape().to_vec();
    accumulate(grads, a, &shape, contrib);
}

fn backprop_op(op: &Op, g: &Tensor, out: &Tensor, values: &[Tensor], grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    match op {
        Op::Input { .. } | Op::Constant(_) => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let (ta, tb) = (&values[a.0], &values[b.0]);
            let ga = reduce_to(gd, ta.len(), |_| 1.0);
            let gb = reduce_to(gd, tb.len(), |_| sign);
            let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
            accumulate(grads, *a, &sa, ga);
            accumulate(grads, *b, &sb, gb);
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (&values[a.0], &values[b.0]);
            let (ad, bd) = (ta.data(), tb.data());
            let ga = reduce_to(gd, ad.len(), |i| bd[i % bd.len()]);
            let gb = reduce_to(gd, bd.len(), |i| ad[i % ad.len()]);
            let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
            accumulate(grads, *a, &sa, ga);
            accumulate(grads, *b, &sb, gb);
        }
        Op::Div(a, b) => {
            let (ta, tb) = (&values[a.0], &values[b.0]);
            let (ad, bd) = (ta.data(), tb.data());
            let ga = reduce_to(gd, ad.len(), |i| 1.0 / bd[i % bd.len()]);
            let gb = reduce_to(gd, bd.len(), |i| {
                let y = bd[i % bd.len()];
                -ad[i % ad.len()] / (y * y)
            });
            let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
            accumulate(grads, *a, &sa, ga);
            accumulate(grads, *b, &sb, gb);
        }
        Op::Max(a, b) => {
            let (ta, tb) = (&values[a.0], &values[b.0]);
            let (ad, bd) = (ta.data(), tb.data());
            let a_wins = |i: usize| ad[i % ad.len()] >= bd[i % bd.len()];
            let ga = reduce_to(gd, ad.len(), |i| if a_wins(i) { 1.0 } else { 0.0 });
            let gb = reduce_to(gd, bd.len(), |i| if a_wins(i) { 0.0 } else { 1.0 });
            let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
            accumulate(grads, *a, &sa, ga);
            accumulate(grads, *b, &sb, gb);
        }
        Op::Neg(a) => unary(grads, values, *a, gd.iter().map(|x| -x).collect()),
        Op::Scale(a, c) => unary(grads, values, *a, gd.iter().map(|x| x * c).collect()),
        Op::Offset(a, _) => unary(grads, values, *a, gd.to_vec()),
        Op::MatMul(a, b) => {
            let (ta, tb) = (&values[a.0], &values[b.0]);
            let (m, k) = match ta.shape() {
                [m, k] => (*m, *k),
                [k] => (1, *k),
                _ => unreachable!(),
            };
            let n = match tb.shape() {
                [_, n] => *n,
                _ => 1,
            };
            // dA = G · Bᵀ, dB = Aᵀ · G
            let mut ga = vec![0.0; m * k];
            let bd = tb.data();
            for i in 0..m {
                let grow = &gd[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &bd[p * n..(p + 1) * n];
                    ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
            let mut gb = vec![0.0; k * n];
            let ad = ta.data();
            for i in 0..m {
                let grow = &gd[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                        *o += aip * gv;
                    }
                }
            }
            let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
            accumulate(grads, *a, &sa, ga);
            accumulate(grads, *b, &sb, gb);
        }
        Op::Tanh(a) => {
            let c = gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
            unary(grads, values, *a, c);
        }
        Op::Sigmoid(a) => {
            let x = values[a.0].data();
            let c = gd
                .iter()
                .zip(out.data())
                .zip(x)
                .map(|((g, y), xv)| {
                    if xv.abs() > SIGMOID_CLAMP {
                        0.0
                    } else {
                        g * y * (1.0 - y)
                    }
                })
                .collect();
            unary(grads, values, *a, c);
        }
        Op::Exp(a) => {
            let c = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
            unary(grads, values, *a, c);
        }
        Op::Log(a) => {
            let x = values[a.0].data();
            let c = gd
                .iter()
                .zip(x)
                .map(|(g, xv)| if *xv < LOG_FLOOR { 0.0 } else { g / xv })
                .collect();
            unary(grads, values, *a, c);
        }
        Op::Sqrt(a) => {
            let c = gd.iter().zip(out.data()).map(|(g, y)| 0.5 * g / y).collect();
            unary(grads, values, *a, c);
        }
        Op::Square(a) => {
            let x = values[a.0].data();
            let c = gd.iter().zip(x).map(|(g, xv)| 2.0 * g * xv).collect();
            unary(grads, values, *a, c);
        }
        Op::Sum(a) => {
            let n = values[a.0].len();
            unary(grads, values, *a, vec![gd[0]; n]);
        }
        Op::SumLast(a) => {
            let t = &values[a.0];
            let w = t.last_dim();
            let c = (0..t.len()).map(|i| gd[i / w]).collect();
            unary(grads, values, *a, c);
        }
        Op::Slice { input, start, len } => {
            let t = &values[input.0];
            let w = t.last_dim();
            let mut c = vec![0.0; t.len()];
            for (r, grow) in gd.chunks(*len).enumerate() {
                c[r * w + start..r * w + start + len].copy_from_slice(grow);
            }
            unary(grads, values, *input, c);
        }
        Op::Concat(parts) => {
            let width = out.last_dim();
            let mut offset = 0;
            for p in parts {
                let t = &values[p.0];
                let w = t.last_dim();
                let c: Vec<f64> = gd
                    .chunks(width)
                    .flat_map(|row| row[offset..offset + w].iter().copied())
                    .collect();
                let shape = t.shape().to_vec();
                accumulate(grads, *p, &shape, c);
                offset += w;
            }
        }
        Op::Recurrence { drive, coeffs, init } => {
            // adjoint: λ[t] = g[t] + Σ_j β_j λ[t + 1 + j]
            let bd = values[coeffs.0].data();
            let y0 = values[init.0].item();
            let y = out.data();
            let n = gd.len();
            let mut lambda = vec![0.0; n];
            for t in (0..n).rev() {
                let mut acc = gd[t];
                for (j, bj) in bd.iter().enumerate() {
                    if t + 1 + j < n {
                        acc += bj * lambda[t + 1 + j];
                    }
                }
                lambda[t] = acc;
            }
            let mut gb = vec![0.0; bd.len()];
            let mut g_init = 0.0;
            for (t, l) in lambda.iter().enumerate() {
                for (j, bj) in bd.iter().enumerate() {
                    if t > j {
                        gb[j] += l * y[t - 1 - j];
                    } else {
                        gb[j] += l * y0;
                        g_init += l * bj;
                    }
                }
            }
            let (sc, si) = (values[coeffs.0].shape().to_vec(), values[init.0].shape().to_vec());
            accumulate(grads, *drive, &[n], lambda);
            accumulate(grads, *coeffs, &sc, gb);
            accumulate(grads, *init, &si, vec![g_init]);
        }
    }
}

/// Largest per-parameter relative discrepancy between the reverse-mode
/// gradient of `output` and central finite differences with the given step.
///
/// Every trainable leaf is perturbed entry by entry. For each parameter
/// tensor the error is `max|analytic - numeric| / max(max|analytic|,
/// max|numeric|, 1e-7)`; the floor makes near-zero gradients compare in
/// absolute terms.
pub fn finite_diff_check(
    graph: &Graph,
    output: NodeId,
    bindings: &TensorMap,
    step: f64,
) -> Result<f64, GraphError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let (_, analytic) = graph.backward_grad(output, bindings)?;
    let mut work = bindings.clone();
    let mut worst: f64 = 0.0;
    for name in graph.param_names() {
        let n = work
            .get(&name)
            .ok_or_else(|| GraphError::Unbound(name.clone()))?
            .len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[&name].data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let up = graph.forward(&work)?.value(output).item();
            work.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let down = graph.forward(&work)?.value(output).item();
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let a = analytic[&name].data();
        let diff = a
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let scale = a
            .iter()
            .chain(&numeric)
            .fold(1e-7f64, |m, v| m.max(v.abs()));
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}
