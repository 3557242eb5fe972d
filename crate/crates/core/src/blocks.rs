//! Recurrent and feedforward building blocks shared by the generative and
//! inference networks.
//!
//! Each block comes in two halves: a *layout* (`GruCell`, `GaussianHead`)
//! that knows its parameter names under a prefix and can declare them in a
//! [`Graph`], and a typed parameter struct (`GruParams`,
//! `GaussianHeadParams`) for standalone numeric evaluation. Both halves store
//! weight matrices as `[fan_in, fan_out]` so a batch of rows `[R, fan_in]`
//! multiplies on the left.

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Graph, GraphError, NodeId, Tensor, TensorMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("dropout rate must lie in [0, 1), got {0}")]
    DropoutRate(f64),
    #[error("sequence is empty")]
    EmptySequence,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Uniform(−a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data)
}

fn fetch(store: &TensorMap, name: &str, shape: &[usize]) -> Result<Tensor, BlockError> {
    let t = store
        .get(name)
        .ok_or_else(|| BlockError::MissingParam(name.to_string()))?;
    if t.shape() != shape {
        return Err(BlockError::Dimension {
            what: name.to_string(),
            expected: shape.iter().product(),
            got: t.len(),
        });
    }
    Ok(t.clone())
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<(), BlockError> {
    if expected != got {
        return Err(BlockError::Dimension {
            what: what.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

const GRU_FIELDS: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

/// Layout of a GRU cell's parameters under `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Graph handles for one declared GRU cell.
#[derive(Debug, Clone, Copy)]
pub struct GruNodes {
    w_z: NodeId,
    w_r: NodeId,
    w_h: NodeId,
    u_z: NodeId,
    u_r: NodeId,
    u_h: NodeId,
    b_z: NodeId,
    b_r: NodeId,
    b_h: NodeId,
}

impl GruCell {
    pub fn new(prefix: &str, input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            input_dim,
            hidden_dim,
        }
    }

    pub fn param_name(&self, field: &str) -> String {
        format!("{}.{}", self.prefix, field)
    }

    fn shape_of(&self, field: &str) -> Vec<usize> {
        match field.as_bytes()[0] {
            b'w' => vec![self.input_dim, self.hidden_dim],
            b'u' => vec![self.hidden_dim, self.hidden_dim],
            _ => vec![self.hidden_dim],
        }
    }

    pub fn init_params(&self, store: &mut TensorMap, rng: &mut impl Rng) {
        for f in GRU_FIELDS {
            let shape = self.shape_of(f);
            let t = if shape.len() == 2 {
                glorot_uniform(shape[0], shape[1], rng)
            } else {
                Tensor::zeros(&shape)
            };
            store.insert(self.param_name(f), t);
        }
    }

    pub fn zero_params(&self, store: &mut TensorMap) {
        for f in GRU_FIELDS {
            store.insert(self.param_name(f), Tensor::zeros(&self.shape_of(f)));
        }
    }

    pub fn check(&self, store: &TensorMap) -> Result<(), BlockError> {
        for f in GRU_FIELDS {
            fetch(store, &self.param_name(f), &self.shape_of(f))?;
        }
        Ok(())
    }

    pub fn declare(&self, g: &mut Graph) -> GruNodes {
        let mut p = |f: &str| g.param(&self.param_name(f));
        GruNodes {
            w_z: p("w_z"),
            w_r: p("w_r"),
            w_h: p("w_h"),
            u_z: p("u_z"),
            u_r: p("u_r"),
            u_h: p("u_h"),
            b_z: p("b_z"),
            b_r: p("b_r"),
            b_h: p("b_h"),
        }
    }
}

impl GruNodes {
    /// One GRU update on a row (or batch of rows):
    ///
    /// ```text
    /// z = σ(x W_z + h U_z + b_z)
    /// r = σ(x W_r + h U_r + b_r)
    /// c = tanh(x W_h + (r ⊙ h) U_h + b_h)
    /// h' = (1 − z) ⊙ h + z ⊙ c
    /// ```
    pub fn step(&self, g: &mut Graph, h_prev: NodeId, x: NodeId) -> NodeId {
        let gate = |g: &mut Graph, w, u, b, h| {
            let xw = g.matmul(x, w);
            let hu = g.matmul(h, u);
            let s = g.add(xw, hu);
            g.add(s, b)
        };
        let zp = gate(g, self.w_z, self.u_z, self.b_z, h_prev);
        let update = g.sigmoid(zp);
        let rp = gate(g, self.w_r, self.u_r, self.b_r, h_prev);
        let reset = g.sigmoid(rp);
        let rh = g.mul(reset, h_prev);
        let cp = gate(g, self.w_h, self.u_h, self.b_h, rh);
        let cand = g.tanh(cp);
        let delta = g.sub(cand, h_prev);
        let moved = g.mul(update, delta);
        g.add(h_prev, moved)
    }
}

/// GRU weights as standalone tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let mut store = TensorMap::new();
        GruCell::new("gru", input_dim, hidden_dim).zero_params(&mut store);
        Self::read("gru", &store, input_dim, hidden_dim).expect("shapes from layout")
    }

    pub fn random(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let mut store = TensorMap::new();
        GruCell::new("gru", input_dim, hidden_dim).init_params(&mut store, rng);
        Self::read("gru", &store, input_dim, hidden_dim).expect("shapes from layout")
    }

    pub fn read(prefix: &str, store: &TensorMap, input_dim: usize, hidden_dim: usize) -> Result<Self, BlockError> {
        let cell = GruCell::new(prefix, input_dim, hidden_dim);
        let get = |f: &str| fetch(store, &cell.param_name(f), &cell.shape_of(f));
        Ok(Self {
            input_dim,
            hidden_dim,
            w_z: get("w_z")?,
            w_r: get("w_r")?,
            w_h: get("w_h")?,
            u_z: get("u_z")?,
            u_r: get("u_r")?,
            u_h: get("u_h")?,
            b_z: get("b_z")?,
            b_r: get("b_r")?,
            b_h: get("b_h")?,
        })
    }

    pub fn write(&self, prefix: &str, store: &mut TensorMap) {
        let fields = [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_h", &self.w_h),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_h", &self.u_h),
            ("b_z", &self.b_z),
            ("b_r", &self.b_r),
            ("b_h", &self.b_h),
        ];
        for (f, t) in fields {
            store.insert(format!("{prefix}.{f}"), t.clone());
        }
    }
}

/// Evaluates a single GRU step numerically.
pub fn gru_step(params: &GruParams, h_prev: &[f64], x: &[f64]) -> Result<Vec<f64>, BlockError> {
    check_len("gru hidden state", params.hidden_dim, h_prev.len())?;
    check_len("gru input", params.input_dim, x.len())?;
    let cell = GruCell::new("gru", params.input_dim, params.hidden_dim);
    let mut g = Graph::new();
    let nodes = cell.declare(&mut g);
    let h = g.input("h");
    let xi = g.input("x");
    let out = nodes.step(&mut g, h, xi);
    let mut b = TensorMap::new();
    params.write("gru", &mut b);
    b.insert("h".into(), Tensor::vector(h_prev.to_vec()));
    b.insert("x".into(), Tensor::vector(x.to_vec()));
    Ok(g.forward(&b)?.value(out).data().to_vec())
}

/// Forward and backward hidden-state sequences of a bidirectional GRU.
///
/// The forward pass starts from a zero state before `x_1`; the backward pass
/// starts from a zero state after `x_T`. Element `t` of the backward result
/// summarises `x_t..x_T`.
pub fn bidirectional_encode(
    fwd: &GruParams,
    bwd: &GruParams,
    xs: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), BlockError> {
    if xs.is_empty() {
        return Err(BlockError::EmptySequence);
    }
    check_len("backward gru hidden", fwd.hidden_dim, bwd.hidden_dim)?;
    let mut g = Graph::new();
    let f = GruCell::new("fwd", fwd.input_dim, fwd.hidden_dim).declare(&mut g);
    let b = GruCell::new("bwd", bwd.input_dim, bwd.hidden_dim).declare(&mut g);
    let x_nodes: Vec<NodeId> = (0..xs.len()).map(|t| g.input(&format!("x.{t}"))).collect();
    let (fs, bs) = encode_nodes(&mut g, &f, &b, &x_nodes, fwd.hidden_dim);

    let mut binds = TensorMap::new();
    fwd.write("fwd", &mut binds);
    bwd.write("bwd", &mut binds);
    for (t, x) in xs.iter().enumerate() {
        check_len("encoder input", fwd.input_dim, x.len())?;
        binds.insert(format!("x.{t}"), Tensor::vector(x.clone()));
    }
    let eval = g.forward(&binds)?;
    let collect = |ids: &[NodeId]| ids.iter().map(|&id| eval.value(id).data().to_vec()).collect();
    Ok((collect(&fs), collect(&bs)))
}

/// Graph-level bidirectional pass. `x_nodes` may hold vectors or row batches;
/// the zero initial states are constants shaped like a single row and
/// broadcast over the batch on the first step.
pub fn encode_nodes(
    g: &mut Graph,
    fwd: &GruNodes,
    bwd: &GruNodes,
    x_nodes: &[NodeId],
    hidden_dim: usize,
) -> (Vec<NodeId>, Vec<NodeId>) {
    let zero = g.constant(Tensor::zeros(&[hidden_dim]));
    let mut forward = Vec::with_capacity(x_nodes.len());
    let mut h = zero;
    for &x in x_nodes {
        h = fwd.step(g, h, x);
        forward.push(h);
    }
    let mut backward = vec![zero; x_nodes.len()];
    let mut h = zero;
    for (t, &x) in x_nodes.iter().enumerate().rev() {
        h = bwd.step(g, h, x);
        backward[t] = h;
    }
    (forward, backward)
}

/// Layout of a two-layer Gaussian head: `tanh` hidden layer, then a linear
/// mean sublayer and an exponential variance sublayer of equal width. With
/// `factor` set, a third linear sublayer of the same width emits one
/// low-rank precision column.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub factor: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub mu: NodeId,
    /// Pre-activation of the variance sublayer, i.e. the log-variance.
    pub log_var: NodeId,
    pub var: NodeId,
    pub factor: Option<NodeId>,
}

impl GaussianHead {
    pub fn new(prefix: &str, input_dim: usize, hidden_dim: usize, out_dim: usize, factor: bool) -> Self {
        Self {
            prefix: prefix.to_string(),
            input_dim,
            hidden_dim,
            out_dim,
            factor,
        }
    }

    pub fn param_name(&self, field: &str) -> String {
        format!("{}.{}", self.prefix, field)
    }

    fn fields(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.out_dim);
        let mut f = vec![
            ("w1", vec![i, h]),
            ("b1", vec![h]),
            ("w_mu", vec![h, o]),
            ("b_mu", vec![o]),
            ("w_var", vec![h, o]),
            ("b_var", vec![o]),
        ];
        if self.factor {
            f.push(("w_v", vec![h, o]));
            f.push(("b_v", vec![o]));
        }
        f
    }

    /// Names of the weight matrices (biases excluded), the targets of L2
    /// regularisation.
    pub fn weight_names(&self) -> Vec<String> {
        self.fields()
            .into_iter()
            .filter(|(_, s)| s.len() == 2)
            .map(|(f, _)| self.param_name(f))
            .collect()
    }

    pub fn init_params(&self, store: &mut TensorMap, rng: &mut impl Rng) {
        for (f, shape) in self.fields() {
            let t = if shape.len() == 2 {
                glorot_uniform(shape[0], shape[1], rng)
            } else {
                Tensor::zeros(&shape)
            };
            store.insert(self.param_name(f), t);
        }
    }

    pub fn zero_params(&self, store: &mut TensorMap) {
        for (f, shape) in self.fields() {
            store.insert(self.param_name(f), Tensor::zeros(&shape));
        }
    }

    pub fn check(&self, store: &TensorMap) -> Result<(), BlockError> {
        for (f, shape) in self.fields() {
            fetch(store, &self.param_name(f), &shape)?;
        }
        Ok(())
    }

    /// Declares the parameters and wires the head onto `h`.
    pub fn apply(&self, g: &mut Graph, h: NodeId) -> HeadOutputs {
        let mut p = |f: &str| g.param(&self.param_name(f));
        let (w1, b1, w_mu, b_mu, w_var, b_var) = (p("w1"), p("b1"), p("w_mu"), p("b_mu"), p("w_var"), p("b_var"));
        let factor_params = self.factor.then(|| (p("w_v"), p("b_v")));
        let a = g.matmul(h, w1);
        let a = g.add(a, b1);
        let hidden = g.tanh(a);
        let linear = |g: &mut Graph, w, b| {
            let y = g.matmul(hidden, w);
            g.add(y, b)
        };
        let mu = linear(g, w_mu, b_mu);
        let log_var = linear(g, w_var, b_var);
        let var = g.exp(log_var);
        let factor = factor_params.map(|(w, b)| linear(g, w, b));
        HeadOutputs {
            mu,
            log_var,
            var,
            factor,
        }
    }
}

/// Gaussian-head weights as standalone tensors (no factor sublayer).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHeadParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w_mu: Tensor,
    pub b_mu: Tensor,
    pub w_var: Tensor,
    pub b_var: Tensor,
}

impl GaussianHeadParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        let mut store = TensorMap::new();
        let head = GaussianHead::new("head", input_dim, hidden_dim, out_dim, false);
        head.zero_params(&mut store);
        Self::read("head", &store, input_dim, hidden_dim, out_dim).expect("shapes from layout")
    }

    pub fn random(input_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let mut store = TensorMap::new();
        let head = GaussianHead::new("head", input_dim, hidden_dim, out_dim, false);
        head.init_params(&mut store, rng);
        Self::read("head", &store, input_dim, hidden_dim, out_dim).expect("shapes from layout")
    }

    pub fn read(
        prefix: &str,
        store: &TensorMap,
        input_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
    ) -> Result<Self, BlockError> {
        let head = GaussianHead::new(prefix, input_dim, hidden_dim, out_dim, false);
        let fields = head.fields();
        let get = |i: usize| fetch(store, &head.param_name(fields[i].0), &fields[i].1);
        Ok(Self {
            input_dim,
            hidden_dim,
            out_dim,
            w1: get(0)?,
            b1: get(1)?,
            w_mu: get(2)?,
            b_mu: get(3)?,
            w_var: get(4)?,
            b_var: get(5)?,
        })
    }

    pub fn write(&self, prefix: &str, store: &mut TensorMap) {
        let fields = [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w_mu", &self.w_mu),
            ("b_mu", &self.b_mu),
            ("w_var", &self.w_var),
            ("b_var", &self.b_var),
        ];
        for (f, t) in fields {
            store.insert(format!("{prefix}.{f}"), t.clone());
        }
    }
}

/// Evaluates a Gaussian head numerically, returning `(mean, variance)`.
pub fn gaussian_head(params: &GaussianHeadParams, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>), BlockError> {
    check_len("gaussian head input", params.input_dim, h.len())?;
    let head = GaussianHead::new("head", params.input_dim, params.hidden_dim, params.out_dim, false);
    let mut g = Graph::new();
    let hi = g.input("h");
    let out = head.apply(&mut g, hi);
    let mut b = TensorMap::new();
    params.write("head", &mut b);
    b.insert("h".into(), Tensor::vector(h.to_vec()));
    let eval = g.forward(&b)?;
    Ok((eval.value(out.mu).data().to_vec(), eval.value(out.var).data().to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Training,
    Inference,
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 − rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<f64>, BlockError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(BlockError::DropoutRate(rate));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

pub fn apply_dropout(
    x: &[f64],
    rate: f64,
    mode: DropoutMode,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, BlockError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(BlockError::DropoutRate(rate));
    }
    if mode == DropoutMode::Inference {
        return Ok(x.to_vec());
    }
    let mask = dropout_mask(x.len(), rate, rng)?;
    Ok(x.iter().zip(mask).map(|(v, m)| v * m).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gru_keeps_zero_state() {
        let p = GruParams::zeros(3, 2);
        assert_eq!(gru_step(&p, &[0.0, 0.0], &[1.0, -4.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_gru_halves_state() {
        // update gate 0.5, candidate 0
        let p = GruParams::zeros(1, 2);
        assert_eq!(gru_step(&p, &[1.0, -1.0], &[3.0]).unwrap(), vec![0.5, -0.5]);
    }

    #[test]
    fn closed_update_gate_copies_state() {
        let mut p = GruParams::zeros(2, 2);
        p.b_z = Tensor::vector(vec![-1000.0, -1000.0]);
        let h = gru_step(&p, &[0.3, -0.7], &[5.0, 5.0]).unwrap();
        assert!((h[0] - 0.3).abs() < 1e-9 && (h[1] + 0.7).abs() < 1e-9);
    }

    #[test]
    fn gru_dimension_mismatch() {
        let p = GruParams::zeros(3, 2);
        assert!(matches!(gru_step(&p, &[0.0; 2], &[0.0; 2]), Err(BlockError::Dimension { .. })));
        assert!(matches!(gru_step(&p, &[0.0; 3], &[0.0; 3]), Err(BlockError::Dimension { .. })));
    }

    #[test]
    fn single_step_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = GruParams::random(2, 3, &mut rng);
        let b = GruParams::random(2, 3, &mut rng);
        let x = vec![0.4, -1.2];
        let (fs, bs) = bidirectional_encode(&f, &b, &[x.clone()]).unwrap();
        assert_eq!(fs[0], gru_step(&f, &[0.0; 3], &x).unwrap());
        assert_eq!(bs[0], gru_step(&b, &[0.0; 3], &x).unwrap());
    }

    #[test]
    fn zero_encoder_is_silent() {
        let f = GruParams::zeros(2, 3);
        let xs = vec![vec![1.0, 2.0], vec![-3.0, 0.5]];
        let (fs, bs) = bidirectional_encode(&f, &f, &xs).unwrap();
        assert!(fs.iter().chain(&bs).flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let f = GruParams::zeros(2, 3);
        assert_eq!(bidirectional_encode(&f, &f, &[]).unwrap_err(), BlockError::EmptySequence);
    }

    #[test]
    fn reversal_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = GruParams::random(2, 4, &mut rng);
        let b = GruParams::random(2, 4, &mut rng);
        let xs: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let (fs, bs) = bidirectional_encode(&f, &b, &xs).unwrap();
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let (fs2, bs2) = bidirectional_encode(&b, &f, &rev).unwrap();
        let mut bs_rev = bs.clone();
        bs_rev.reverse();
        let mut fs_rev = fs.clone();
        fs_rev.reverse();
        assert_eq!(fs2, bs_rev);
        assert_eq!(bs2, fs_rev);
    }

    #[test]
    fn zero_head_is_standard_normal() {
        let p = GaussianHeadParams::zeros(3, 4, 2);
        let (mu, var) = gaussian_head(&p, &[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(mu, vec![0.0, 0.0]);
        assert_eq!(var, vec![1.0, 1.0]);
    }

    #[test]
    fn head_biases_set_outputs() {
        let mut p = GaussianHeadParams::zeros(2, 3, 2);
        p.b_var = Tensor::vector(vec![4f64.ln(); 2]);
        p.b_mu = Tensor::vector(vec![1.0, -2.0]);
        let (mu, var) = gaussian_head(&p, &[0.3, 0.3]).unwrap();
        assert_eq!(mu, vec![1.0, -2.0]);
        assert!(var.iter().all(|v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn head_rejects_wrong_input() {
        let p = GaussianHeadParams::zeros(2, 3, 2);
        assert!(gaussian_head(&p, &[1.0]).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![1.0, -2.0, 3.0];
        assert_eq!(apply_dropout(&x, 0.0, DropoutMode::Training, &mut rng).unwrap(), x);
        assert_eq!(apply_dropout(&x, 0.7, DropoutMode::Inference, &mut rng).unwrap(), x);
        assert!(apply_dropout(&x, 1.0, DropoutMode::Training, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = vec![1.0; 100_000];
        let y = apply_dropout(&x, 0.5, DropoutMode::Training, &mut rng).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((0.98..=1.02).contains(&mean), "{mean}");
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn gru_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = GruCell::new("c", 3, 4);
        let mut b = TensorMap::new();
        cell.init_params(&mut b, &mut rng);
        for f in ["b_z", "b_r", "b_h"] {
            let t = b.get_mut(&cell.param_name(f)).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let mut g = Graph::new();
        let nodes = cell.declare(&mut g);
        let x = g.input("x");
        let h0 = g.param("h0");
        let h1 = nodes.step(&mut g, h0, x);
        let h2 = nodes.step(&mut g, h1, x);
        let sq = g.square(h2);
        let y = g.sum(sq);
        b.insert("x".into(), Tensor::matrix(2, 3, (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()));
        b.insert("h0".into(), Tensor::matrix(2, 4, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()));
        let err = crate::tensor::finite_diff_check(&g, y, &b, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn vec_in(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(lo..hi, len)
    }

    proptest! {
        #[test]
        fn gru_output_is_bounded(seed in any::<u64>(), h in vec_in(4, -3.0, 3.0), x in vec_in(2, -5.0, 5.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = GruParams::random(2, 4, &mut rng);
            for b in [&mut p.b_z, &mut p.b_r, &mut p.b_h] {
                b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
            }
            let out = gru_step(&p, &h, &x).unwrap();
            for (o, hp) in out.iter().zip(&h) {
                prop_assert!(o.abs() <= hp.abs().max(1.0) + 1e-12);
            }
        }

        #[test]
        fn encoder_is_causal(seed in any::<u64>(), s in 0usize..5, bump in 0.1f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = GruParams::random(2, 3, &mut rng);
            let b = GruParams::random(2, 3, &mut rng);
            let xs: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let mut ys = xs.clone();
            ys[s][0] += bump;
            let (f1, b1) = bidirectional_encode(&f, &b, &xs).unwrap();
            let (f2, b2) = bidirectional_encode(&f, &b, &ys).unwrap();
            for t in 0..s {
                prop_assert_eq!(&f1[t], &f2[t]);
            }
            for t in s + 1..5 {
                prop_assert_eq!(&b1[t], &b2[t]);
            }
        }

        #[test]
        fn head_variance_is_positive(seed in any::<u64>(), h in vec_in(3, -10.0, 10.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = GaussianHeadParams::random(3, 5, 2, &mut rng);
            p.b_var.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-20.0..20.0));
            let (_, var) = gaussian_head(&p, &h).unwrap();
            prop_assert!(var.iter().all(|&v| v > 0.0));
        }
    }
}
