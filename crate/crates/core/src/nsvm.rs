//! Neural stochastic volatility model.
//!
//! Generative network Φ:
//!
//! ```text
//! h^z_t = GRU_z(h^z_{t-1}, z_{t-1})            (μ^z_t, Σ^z_t) = head_z(h^z_t)
//! h^x_t = GRU_x(h^x_{t-1}, [x_{t-1}, z_t])     (μ^x_t, Σ^x_t[, v_t]) = head_x(h^x_t)
//! ```
//!
//! Inference network Ψ:
//!
//! ```text
//! h→_t, h←_t = bidirectional GRU over x_{1:T}
//! h̃_t = GRU_post(h̃_{t-1}, [z_{t-1}, h→_t, h←_t])   (μ̃_t, Σ̃_t) = head_post(h̃_t)
//! z_t = μ̃_t + Σ̃_t^{1/2} ε_t
//! ```
//!
//! `z_0`, `x_0` and every initial hidden state are zero. All covariances are
//! diagonal except Σ^x with rank 1, whose precision gains `v_t v_tᵀ`.
//!
//! Two evaluation routes exist. The numeric route ([`prior_step`],
//! [`obs_step`], [`infer_paths`], [`elbo_estimate`]) walks one path at a
//! time. The graph route unrolls a whole window with sample paths (and
//! windows) stacked as rows; training and forecasting use it.

use std::fs::OpenOptions;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{
    dropout_mask, gaussian_head, gru_step, BlockError, GaussianHead, GaussianHeadParams, GruCell, GruParams,
};
use crate::covariance::{self, log_pdf_node, CovarianceError, LowRankGaussian};
use crate::optim::Adam;
use crate::tensor::{Checkpoint, CheckpointError, Graph, GraphError, NodeId, Tensor, TensorMap};

#[derive(Debug, Error)]
pub enum NsvmError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
    },
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Covariance(#[from] CovarianceError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NsvmConfig {
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Sample paths used for evaluation and forecasting.
    pub sample_paths: usize,
    /// Sample paths per window during training.
    pub train_paths: usize,
    /// 0 for diagonal observation covariance, 1 for a rank-1 precision term.
    pub covariance_rank: usize,
    pub dropout_rate: f64,
    pub l2_weight: f64,
    pub learning_rate: f64,
    pub lr_decay_per_epoch: f64,
    pub max_epochs: usize,
    /// Length of the training windows and of the forecasting context.
    pub window: usize,
    /// Windows per optimizer step.
    pub batch_windows: usize,
    /// Windows drawn per epoch, as a multiple of `T / window`.
    pub windows_per_epoch: f64,
    /// Fraction of `max_epochs` after which the rank-1 term is switched on.
    pub corr_switch: f64,
    /// Pin μ^x to zero.
    pub clamp_mu: bool,
}

impl Default for NsvmConfig {
    fn default() -> Self {
        Self {
            obs_dim: 6,
            latent_dim: 4,
            hidden_dim: 10,
            sample_paths: 100,
            train_paths: 1,
            covariance_rank: 0,
            dropout_rate: 0.1,
            l2_weight: 1e-4,
            learning_rate: 1e-3,
            lr_decay_per_epoch: 0.98,
            max_epochs: 100,
            window: 100,
            batch_windows: 1,
            windows_per_epoch: 1.0,
            corr_switch: 0.8,
            clamp_mu: false,
        }
    }
}

impl NsvmConfig {
    pub fn validate(&self) -> Result<(), NsvmError> {
        let bad = |m: String| Err(NsvmError::Config(m));
        if self.obs_dim == 0 || self.latent_dim == 0 || self.hidden_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.sample_paths == 0 || self.train_paths == 0 {
            return bad("sample path counts must be at least 1".into());
        }
        if self.covariance_rank > 1 {
            return bad(format!("covariance_rank must be 0 or 1, got {}", self.covariance_rank));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.window == 0 || self.batch_windows == 0 {
            return bad("window and batch_windows must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay_per_epoch > 0.0) || self.l2_weight < 0.0 {
            return bad("learning rate and decay must be positive, l2_weight nonnegative".into());
        }
        if !(self.windows_per_epoch > 0.0) || !(0.0..=1.0).contains(&self.corr_switch) {
            return bad("windows_per_epoch must be positive and corr_switch in [0, 1]".into());
        }
        Ok(())
    }

    /// First epoch (0-based) trained with the rank-1 term.
    pub fn corr_switch_epoch(&self) -> usize {
        (self.corr_switch * self.max_epochs as f64).ceil() as usize
    }
}

/// Parameter names and shapes for a configuration.
#[derive(Debug, Clone)]
struct Layout {
    rnn_z: GruCell,
    head_z: GaussianHead,
    rnn_x: GruCell,
    head_x: GaussianHead,
    rnn_fwd: GruCell,
    rnn_bwd: GruCell,
    rnn_post: GruCell,
    head_post: GaussianHead,
}

impl Layout {
    fn new(c: &NsvmConfig) -> Self {
        let (m, l, h) = (c.obs_dim, c.latent_dim, c.hidden_dim);
        Self {
            rnn_z: GruCell::new("phi.rnn_z", l, h),
            head_z: GaussianHead::new("phi.head_z", h, h, l, false),
            rnn_x: GruCell::new("phi.rnn_x", m + l, h),
            head_x: GaussianHead::new("phi.head_x", h, h, m, c.covariance_rank == 1),
            rnn_fwd: GruCell::new("psi.rnn_fwd", m, h),
            rnn_bwd: GruCell::new("psi.rnn_bwd", m, h),
            rnn_post: GruCell::new("psi.rnn_post", l + 2 * h, h),
            head_post: GaussianHead::new("psi.head_post", h, h, l, false),
        }
    }

    fn cells(&self) -> [&GruCell; 5] {
        [&self.rnn_z, &self.rnn_x, &self.rnn_fwd, &self.rnn_bwd, &self.rnn_post]
    }

    fn heads(&self) -> [&GaussianHead; 3] {
        [&self.head_z, &self.head_x, &self.head_post]
    }

    fn head_x_with(&self, factor: bool) -> GaussianHead {
        let h = &self.head_x;
        GaussianHead::new("phi.head_x", h.input_dim, h.hidden_dim, h.out_dim, factor)
    }
}

/// Generative-network weights Φ as typed blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeParams {
    pub rnn_z: GruParams,
    pub head_z: GaussianHeadParams,
    pub rnn_x: GruParams,
    pub head_x: GaussianHeadParams,
    /// `(w_v, b_v)` of the rank-1 sublayer when active.
    pub factor: Option<(Tensor, Tensor)>,
    pub clamp_mu: bool,
}

/// Inference-network weights Ψ as typed blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceParams {
    pub rnn_fwd: GruParams,
    pub rnn_bwd: GruParams,
    pub rnn_post: GruParams,
    pub head_post: GaussianHeadParams,
}

/// Posterior sample paths with everything needed to reproduce them.
/// Indexing is `[path][step][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPathBatch {
    pub z: Vec<Vec<Vec<f64>>>,
    pub mu: Vec<Vec<Vec<f64>>>,
    pub var: Vec<Vec<Vec<f64>>>,
    pub eps: Vec<Vec<Vec<f64>>>,
}

impl LatentPathBatch {
    pub fn paths(&self) -> usize {
        self.z.len()
    }

    pub fn steps(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }
}

/// One predictive component per sample path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathComponents {
    pub mu: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    pub factor: Option<Vec<Vec<f64>>>,
}

/// A model: configuration plus every Φ and Ψ tensor, keyed `phi.*` / `psi.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Nsvm {
    pub config: NsvmConfig,
    pub params: TensorMap,
    /// Whether the rank-1 observation term is in use.
    pub factor_active: bool,
}

impl Nsvm {
    /// Glorot-initialised weights, zero biases.
    pub fn new(config: NsvmConfig, rng: &mut impl Rng) -> Result<Self, NsvmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = TensorMap::new();
        for c in layout.cells() {
            c.init_params(&mut params, rng);
        }
        for h in layout.heads() {
            h.init_params(&mut params, rng);
        }
        Ok(Self {
            config,
            params,
            factor_active: false,
        })
    }

    /// Every weight and bias zero.
    pub fn zeros(config: NsvmConfig) -> Result<Self, NsvmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = TensorMap::new();
        for c in layout.cells() {
            c.zero_params(&mut params);
        }
        for h in layout.heads() {
            h.zero_params(&mut params);
        }
        Ok(Self {
            config,
            params,
            factor_active: false,
        })
    }

    fn check(&self) -> Result<(), NsvmError> {
        let layout = Layout::new(&self.config);
        for c in layout.cells() {
            c.check(&self.params)?;
        }
        for h in layout.heads() {
            h.check(&self.params)?;
        }
        Ok(())
    }

    fn uses_factor(&self) -> bool {
        self.factor_active && self.config.covariance_rank == 1
    }

    pub fn generative(&self) -> Result<GenerativeParams, NsvmError> {
        let c = &self.config;
        let (m, l, h) = (c.obs_dim, c.latent_dim, c.hidden_dim);
        let factor = if self.uses_factor() {
            let get = |f: &str| {
                self.params
                    .get(&format!("phi.head_x.{f}"))
                    .cloned()
                    .ok_or_else(|| BlockError::MissingParam(format!("phi.head_x.{f}")))
            };
            Some((get("w_v")?, get("b_v")?))
        } else {
            None
        };
        Ok(GenerativeParams {
            rnn_z: GruParams::read("phi.rnn_z", &self.params, l, h)?,
            head_z: GaussianHeadParams::read("phi.head_z", &self.params, h, h, l)?,
            rnn_x: GruParams::read("phi.rnn_x", &self.params, m + l, h)?,
            head_x: GaussianHeadParams::read("phi.head_x", &self.params, h, h, m)?,
            factor,
            clamp_mu: c.clamp_mu,
        })
    }

    pub fn inference(&self) -> Result<InferenceParams, NsvmError> {
        let c = &self.config;
        let (m, l, h) = (c.obs_dim, c.latent_dim, c.hidden_dim);
        Ok(InferenceParams {
            rnn_fwd: GruParams::read("psi.rnn_fwd", &self.params, m, h)?,
            rnn_bwd: GruParams::read("psi.rnn_bwd", &self.params, m, h)?,
            rnn_post: GruParams::read("psi.rnn_post", &self.params, l + 2 * h, h)?,
            head_post: GaussianHeadParams::read("psi.head_post", &self.params, h, h, l)?,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone());
        let table = toml::Table::try_from(&self.config).expect("config serializes");
        for (k, v) in table {
            ck.meta.insert(k, v.to_string());
        }
        ck.meta.insert("factor_active".into(), self.factor_active.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NsvmError> {
        let mut text = String::new();
        let mut factor_active = false;
        for (k, v) in &ck.meta {
            if k == "factor_active" {
                factor_active = v == "true";
            } else {
                text.push_str(&format!("{k} = {v}\n"));
            }
        }
        let config: NsvmConfig =
            toml::from_str(&text).map_err(|e| NsvmError::Config(format!("checkpoint header: {e}")))?;
        config.validate()?;
        let model = Self {
            config,
            params: ck.tensors.clone(),
            factor_active,
        };
        model.check()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), NsvmError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, NsvmError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Graph-route path-average ELBO of one sequence with explicit noise
    /// `eps[path][step]`. Returns the per-path values.
    pub fn elbo_paths_graph(&self, x: &[Vec<f64>], eps: &[Vec<Vec<f64>>]) -> Result<Vec<f64>, NsvmError> {
        check_sequence(&self.config, x)?;
        let rows = eps.len();
        let len = x.len();
        let wg = WindowGraph::build(&self.config, len, rows, false, self.uses_factor(), Mode::Score);
        let mut binds = TensorMap::new();
        for t in 0..len {
            binds.insert(format!("x.{t}"), replicate(&x[t], rows));
            let rows_eps: Vec<Vec<f64>> = eps.iter().map(|p| p[t].clone()).collect();
            binds.insert(format!("eps.{t}"), Tensor::from_rows(&rows_eps));
        }
        let eval = wg.graph.forward(&(&binds, &self.params))?;
        Ok(eval.value(wg.elbo_rows.expect("score mode")).data().to_vec())
    }

    /// Path-average ELBO of one sequence with explicit noise, and its
    /// gradient with respect to every Φ and Ψ tensor. No dropout, no L2.
    pub fn elbo_gradient(&self, x: &[Vec<f64>], eps: &[Vec<Vec<f64>>]) -> Result<(f64, TensorMap), NsvmError> {
        check_sequence(&self.config, x)?;
        let rows = eps.len();
        if rows == 0 {
            return Err(NsvmError::Config("at least one sample path is required".into()));
        }
        let len = x.len();
        let mut wg = WindowGraph::build(&self.config, len, rows, false, self.uses_factor(), Mode::Score);
        let total = wg.graph.sum(wg.elbo_rows.expect("score mode"));
        let mean = wg.graph.scale(total, 1.0 / rows as f64);
        let mut binds = TensorMap::new();
        for t in 0..len {
            binds.insert(format!("x.{t}"), replicate(&x[t], rows));
            let rows_eps: Vec<Vec<f64>> = eps.iter().map(|p| p[t].clone()).collect();
            binds.insert(format!("eps.{t}"), Tensor::from_rows(&rows_eps));
        }
        let (value, mut grads) = wg.graph.backward_grad(mean, &(&binds, &self.params))?;
        grads.retain(|name, _| self.params.contains_key(name));
        Ok((value, grads))
    }

    /// One-step-ahead predictive components for each context window. All
    /// windows must share a length. Row order is window-major.
    pub fn predict_next(
        &self,
        windows: &[&[Vec<f64>]],
        paths: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<PathComponents>, NsvmError> {
        let Some(first) = windows.first() else {
            return Ok(Vec::new());
        };
        let len = first.len();
        for w in windows {
            if w.len() != len {
                return Err(NsvmError::Dimension("context windows differ in length".into()));
            }
            check_sequence(&self.config, w)?;
        }
        let rows = windows.len() * paths;
        let wg = WindowGraph::build(&self.config, len, rows, false, self.uses_factor(), Mode::Predict);
        let mut binds = TensorMap::new();
        let (m, l) = (self.config.obs_dim, self.config.latent_dim);
        for t in 0..len {
            let mut data = Vec::with_capacity(rows * m);
            for w in windows {
                for _ in 0..paths {
                    data.extend_from_slice(&w[t]);
                }
            }
            binds.insert(format!("x.{t}"), Tensor::matrix(rows, m, data));
            binds.insert(format!("eps.{t}"), normal_matrix(rows, l, rng));
        }
        binds.insert("eps.prior".into(), normal_matrix(rows, l, rng));
        let eval = wg.graph.forward(&(&binds, &self.params))?;
        let next = wg.next.expect("predict mode");
        let mu = eval.value(next.mu);
        let var = eval.value(next.var);
        let factor = next.factor.map(|f| eval.value(f));
        let mut out = Vec::with_capacity(windows.len());
        for w in 0..windows.len() {
            let range = w * paths..(w + 1) * paths;
            let take = |t: &Tensor| range.clone().map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
            out.push(PathComponents {
                mu: if self.config.clamp_mu {
                    vec![vec![0.0; m]; paths]
                } else {
                    take(mu)
                },
                var: take(var),
                factor: factor.map(take),
            });
        }
        Ok(out)
    }
}

fn check_sequence(c: &NsvmConfig, x: &[Vec<f64>]) -> Result<(), NsvmError> {
    if x.is_empty() {
        return Err(NsvmError::EmptySequence);
    }
    if let Some(bad) = x.iter().find(|r| r.len() != c.obs_dim) {
        return Err(NsvmError::Dimension(format!(
            "observation of length {} for obs_dim {}",
            bad.len(),
            c.obs_dim
        )));
    }
    Ok(())
}

fn replicate(row: &[f64], rows: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * row.len());
    for _ in 0..rows {
        data.extend_from_slice(row);
    }
    Tensor::matrix(rows, row.len(), data)
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data)
}

fn factor_column(phi: &GenerativeParams, h: &[f64]) -> Option<Vec<f64>> {
    let (w_v, b_v) = phi.factor.as_ref()?;
    let head = &phi.head_x;
    let hid = head.hidden_dim;
    let mut a = head.b1.data().to_vec();
    for (i, hi) in h.iter().enumerate() {
        for (j, aj) in a.iter_mut().enumerate() {
            *aj += hi * head.w1.data()[i * hid + j];
        }
    }
    let a: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
    let out = head.out_dim;
    let mut v = b_v.data().to_vec();
    for (i, ai) in a.iter().enumerate() {
        for (j, vj) in v.iter_mut().enumerate() {
            *vj += ai * w_v.data()[i * out + j];
        }
    }
    Some(v)
}

/// Latent prior transition: returns `(h, μ^z, var^z)`.
pub fn prior_step(
    phi: &GenerativeParams,
    h_prev: &[f64],
    z_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), NsvmError> {
    let h = gru_step(&phi.rnn_z, h_prev, z_prev)?;
    let (mu, var) = gaussian_head(&phi.head_z, &h)?;
    Ok((h, mu, var))
}

/// Observation model: returns `(h, μ^x, Σ^x)`.
pub fn obs_step(
    phi: &GenerativeParams,
    h_prev: &[f64],
    x_prev: &[f64],
    z: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, LowRankGaussian), NsvmError> {
    let input: Vec<f64> = x_prev.iter().chain(z).copied().collect();
    let h = gru_step(&phi.rnn_x, h_prev, &input)?;
    let (mut mu, var) = gaussian_head(&phi.head_x, &h)?;
    if phi.clamp_mu {
        mu.iter_mut().for_each(|m| *m = 0.0);
    }
    let v = factor_column(phi, &h);
    let cov = LowRankGaussian::from_variance_and_column(&var, v.as_deref())?;
    Ok((h, mu, cov))
}

/// Posterior means and variances for every step of one path, given its
/// noise. Returns `(z, mu, var)` per step.
fn posterior_path(
    psi: &InferenceParams,
    fwd: &[Vec<f64>],
    bwd: &[Vec<f64>],
    eps: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>), NsvmError> {
    let latent = psi.head_post.out_dim;
    let mut h = vec![0.0; psi.rnn_post.hidden_dim];
    let mut z_prev = vec![0.0; latent];
    let (mut zs, mut mus, mut vars) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..fwd.len() {
        if eps[t].len() != latent {
            return Err(NsvmError::Dimension(format!("noise of length {} for latent_dim {latent}", eps[t].len())));
        }
        let input: Vec<f64> = z_prev.iter().chain(&fwd[t]).chain(&bwd[t]).copied().collect();
        h = gru_step(&psi.rnn_post, &h, &input)?;
        let (mu, var) = gaussian_head(&psi.head_post, &h)?;
        let z: Vec<f64> = (0..latent).map(|k| mu[k] + var[k].sqrt() * eps[t][k]).collect();
        z_prev = z.clone();
        zs.push(z);
        mus.push(mu);
        vars.push(var);
    }
    Ok((zs, mus, vars))
}

/// Draws `paths` posterior trajectories for `x` by reparameterisation.
pub fn infer_paths(
    psi: &InferenceParams,
    x: &[Vec<f64>],
    paths: usize,
    rng: &mut impl Rng,
) -> Result<LatentPathBatch, NsvmError> {
    if x.is_empty() {
        return Err(NsvmError::EmptySequence);
    }
    if paths == 0 {
        return Err(NsvmError::Config("at least one sample path is required".into()));
    }
    let latent = psi.head_post.out_dim;
    let (fwd, bwd) = crate::blocks::bidirectional_encode(&psi.rnn_fwd, &psi.rnn_bwd, x)?;
    let mut batch = LatentPathBatch {
        z: Vec::new(),
        mu: Vec::new(),
        var: Vec::new(),
        eps: Vec::new(),
    };
    for _ in 0..paths {
        let eps: Vec<Vec<f64>> = (0..x.len())
            .map(|_| (0..latent).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let (z, mu, var) = posterior_path(psi, &fwd, &bwd, &eps)?;
        batch.z.push(z);
        batch.mu.push(mu);
        batch.var.push(var);
        batch.eps.push(eps);
    }
    Ok(batch)
}

fn diag_log_pdf(x: &[f64], mu: &[f64], var: &[f64]) -> Result<f64, CovarianceError> {
    let prec: Vec<f64> = var.iter().map(|v| 1.0 / v).collect();
    covariance::log_pdf(x, mu, &prec, &[])
}

/// Per-path ELBO terms `Σ_t [log p(x_t|·) + log p(z_t|·) − log q(z_t|·)]`.
/// Latent paths are recomputed from Ψ and the stored noise, so the result
/// is a deterministic function of Φ and Ψ.
pub fn elbo_paths(
    phi: &GenerativeParams,
    psi: &InferenceParams,
    x: &[Vec<f64>],
    paths: &LatentPathBatch,
) -> Result<Vec<f64>, NsvmError> {
    if x.is_empty() {
        return Err(NsvmError::EmptySequence);
    }
    if paths.steps() != x.len() {
        return Err(NsvmError::Dimension(format!(
            "paths cover {} steps, sequence has {}",
            paths.steps(),
            x.len()
        )));
    }
    let (fwd, bwd) = crate::blocks::bidirectional_encode(&psi.rnn_fwd, &psi.rnn_bwd, x)?;
    let obs = x[0].len();
    let hid = phi.rnn_z.hidden_dim;
    let mut out = Vec::with_capacity(paths.paths());
    for eps in &paths.eps {
        let (zs, mus, vars) = posterior_path(psi, &fwd, &bwd, eps)?;
        let (mut hz, mut hx) = (vec![0.0; hid], vec![0.0; hid]);
        let mut z_prev = vec![0.0; zs[0].len()];
        let mut x_prev = vec![0.0; obs];
        let mut total = 0.0;
        for t in 0..x.len() {
            let (h, mu_z, var_z) = prior_step(phi, &hz, &z_prev)?;
            hz = h;
            let (h, mu_x, cov_x) = obs_step(phi, &hx, &x_prev, &zs[t])?;
            hx = h;
            let latent = diag_log_pdf(&zs[t], &mu_z, &var_z)? - diag_log_pdf(&zs[t], &mus[t], &vars[t])?;
            total += cov_x.log_pdf(&x[t], &mu_x)? + latent;
            z_prev = zs[t].clone();
            x_prev = x[t].clone();
        }
        out.push(total);
    }
    Ok(out)
}

/// Path-average ELBO estimate.
pub fn elbo_estimate(
    phi: &GenerativeParams,
    psi: &InferenceParams,
    x: &[Vec<f64>],
    paths: &LatentPathBatch,
) -> Result<f64, NsvmError> {
    let per = elbo_paths(phi, psi, x, paths)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Score,
    Predict,
}

const MASKED_CELLS: [&str; 5] = ["fwd", "bwd", "post", "z", "x"];

/// A window of the model unrolled over `len` steps with `rows` stacked
/// sample paths.
///
/// Inputs: `x.{t}` `[rows, obs]`, `eps.{t}` `[rows, latent]`, and with
/// dropout `mask.{cell}.{t}` over each recurrent input. Predict mode adds
/// `eps.prior` for the latent one step past the window.
struct WindowGraph {
    graph: Graph,
    elbo_rows: Option<NodeId>,
    loss: Option<NodeId>,
    next: Option<crate::blocks::HeadOutputs>,
}

impl WindowGraph {
    fn build(c: &NsvmConfig, len: usize, rows: usize, dropout: bool, factor: bool, mode: Mode) -> Self {
        let layout = Layout::new(c);
        let head_x = layout.head_x_with(factor);
        let (m, l, h) = (c.obs_dim, c.latent_dim, c.hidden_dim);
        let mut g = Graph::new();
        let rnn_z = layout.rnn_z.declare(&mut g);
        let rnn_x = layout.rnn_x.declare(&mut g);
        let rnn_fwd = layout.rnn_fwd.declare(&mut g);
        let rnn_bwd = layout.rnn_bwd.declare(&mut g);
        let rnn_post = layout.rnn_post.declare(&mut g);
        let masked = |g: &mut Graph, cell: &str, t: usize, node: NodeId| {
            if dropout {
                let mask = g.input(&format!("mask.{cell}.{t}"));
                g.mul(node, mask)
            } else {
                node
            }
        };
        let xs: Vec<NodeId> = (0..len).map(|t| g.input(&format!("x.{t}"))).collect();
        let zero_h = g.constant(Tensor::zeros(&[h]));
        let mut fwd = Vec::with_capacity(len);
        let mut state = zero_h;
        for (t, &x) in xs.iter().enumerate() {
            let xin = masked(&mut g, "fwd", t, x);
            state = rnn_fwd.step(&mut g, state, xin);
            fwd.push(state);
        }
        let mut bwd = vec![zero_h; len];
        let mut state = zero_h;
        for (t, &x) in xs.iter().enumerate().rev() {
            let xin = masked(&mut g, "bwd", t, x);
            state = rnn_bwd.step(&mut g, state, xin);
            bwd[t] = state;
        }

        let x0 = g.constant(Tensor::zeros(&[rows, m]));
        let mut z_prev = g.constant(Tensor::zeros(&[rows, l]));
        let mu_zero = g.constant(Tensor::zeros(&[rows, m]));
        let (mut h_post, mut h_z, mut h_x) = (zero_h, zero_h, zero_h);
        let mut acc: Option<NodeId> = None;
        for t in 0..len {
            let post_in = g.concat(&[z_prev, fwd[t], bwd[t]]);
            let post_in = masked(&mut g, "post", t, post_in);
            h_post = rnn_post.step(&mut g, h_post, post_in);
            let q = layout.head_post.apply(&mut g, h_post);
            let eps = g.input(&format!("eps.{t}"));
            let half = g.scale(q.log_var, 0.5);
            let sd = g.exp(half);
            let noise = g.mul(sd, eps);
            let z = g.add(q.mu, noise);

            if mode == Mode::Score {
                let z_in = masked(&mut g, "z", t, z_prev);
                h_z = rnn_z.step(&mut g, h_z, z_in);
                let p = layout.head_z.apply(&mut g, h_z);
                let x_prev = if t == 0 { x0 } else { xs[t - 1] };
                let obs_in = g.concat(&[x_prev, z]);
                let obs_in = masked(&mut g, "x", t, obs_in);
                h_x = rnn_x.step(&mut g, h_x, obs_in);
                let o = head_x.apply(&mut g, h_x);
                let mu_x = if c.clamp_mu { mu_zero } else { o.mu };
                let lpx = log_pdf_node(&mut g, xs[t], mu_x, o.log_var, o.factor, m);
                let lpz = log_pdf_node(&mut g, z, p.mu, p.log_var, None, l);
                let lq = log_pdf_node(&mut g, z, q.mu, q.log_var, None, l);
                let ratio = g.sub(lpz, lq);
                let term = g.add(lpx, ratio);
                acc = Some(match acc {
                    Some(a) => g.add(a, term),
                    None => term,
                });
            } else {
                h_z = rnn_z.step(&mut g, h_z, z_prev);
                let x_prev = if t == 0 { x0 } else { xs[t - 1] };
                let obs_in = g.concat(&[x_prev, z]);
                h_x = rnn_x.step(&mut g, h_x, obs_in);
            }
            z_prev = z;
        }

        let mut out = Self {
            graph: Graph::new(),
            elbo_rows: None,
            loss: None,
            next: None,
        };
        match mode {
            Mode::Score => {
                let rows_node = acc.expect("len ≥ 1");
                let total = g.sum(rows_node);
                let mut loss = g.scale(total, -1.0 / (rows * len) as f64);
                if c.l2_weight > 0.0 {
                    let names = layout
                        .head_z
                        .weight_names()
                        .into_iter()
                        .chain(head_x.weight_names())
                        .chain(layout.head_post.weight_names());
                    for name in names {
                        let w = g.param(&name);
                        let sq = g.square(w);
                        let s = g.sum(sq);
                        let s = g.scale(s, c.l2_weight);
                        loss = g.add(loss, s);
                    }
                }
                out.elbo_rows = Some(rows_node);
                out.loss = Some(loss);
            }
            Mode::Predict => {
                h_z = rnn_z.step(&mut g, h_z, z_prev);
                let p = layout.head_z.apply(&mut g, h_z);
                let eps = g.input("eps.prior");
                let half = g.scale(p.log_var, 0.5);
                let sd = g.exp(half);
                let noise = g.mul(sd, eps);
                let z = g.add(p.mu, noise);
                let obs_in = g.concat(&[xs[len - 1], z]);
                h_x = rnn_x.step(&mut g, h_x, obs_in);
                out.next = Some(head_x.apply(&mut g, h_x));
            }
        }
        out.graph = g;
        out
    }
}

/// One optimizer step in the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    /// Appends to a CSV file with header `epoch,step,loss,lr`, writing the
    /// header only when the file is new or empty.
    pub fn append_csv(&self, path: &Path) -> Result<(), NsvmError> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| NsvmError::Log(e.to_string()))?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        for row in &self.rows {
            w.serialize(row).map_err(|e| NsvmError::Log(e.to_string()))?;
        }
        w.flush().map_err(|e| NsvmError::Log(e.to_string()))?;
        Ok(())
    }

    /// Mean loss over the last `n` steps (all steps when fewer).
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.rows.len()).max(1);
        self.rows[self.rows.len().saturating_sub(k)..]
            .iter()
            .map(|r| r.loss)
            .sum::<f64>()
            / k as f64
    }
}

/// Trains a fresh model for `config.max_epochs` epochs.
pub fn train(
    config: &NsvmConfig,
    x_train: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<(Nsvm, TrainingLog), NsvmError> {
    let model = Nsvm::new(config.clone(), rng)?;
    train_from(model, x_train, config.max_epochs, 0, rng)
}

/// Continues training `model` for `epochs` epochs, numbering them from
/// `first_epoch` (which drives learning-rate decay and the rank-1 switch).
///
/// Each epoch draws `windows_per_epoch · T / window` windows uniformly at
/// random, groups them `batch_windows` per Adam step, and minimises
/// `−ELBO / (window · paths) + l2 · Σ‖MLP weights‖²`.
pub fn train_from(
    mut model: Nsvm,
    x_train: &[Vec<f64>],
    epochs: usize,
    first_epoch: usize,
    rng: &mut impl Rng,
) -> Result<(Nsvm, TrainingLog), NsvmError> {
    let c = model.config.clone();
    c.validate()?;
    check_sequence(&c, x_train)?;
    model.check()?;
    let t_len = x_train.len();
    let len = c.window.min(t_len);
    let n_windows = ((c.windows_per_epoch * t_len as f64 / len as f64).round() as usize).max(1);
    let n_steps = n_windows.div_ceil(c.batch_windows);
    let rows = c.batch_windows * c.train_paths;
    let dropout = c.dropout_rate > 0.0;
    let mut adam = Adam::new(c.learning_rate);
    let mut log = TrainingLog::default();
    let mut graph: Option<(bool, WindowGraph)> = None;
    let mut step = 0;
    for epoch in first_epoch..first_epoch + epochs {
        if c.covariance_rank == 1 && epoch >= c.corr_switch_epoch() {
            model.factor_active = true;
        }
        let factor = model.uses_factor();
        if graph.as_ref().is_none_or(|(f, _)| *f != factor) {
            graph = Some((factor, WindowGraph::build(&c, len, rows, dropout, factor, Mode::Score)));
        }
        let wg = &graph.as_ref().expect("built").1;
        let loss_node = wg.loss.expect("score mode");
        adam.lr = c.learning_rate * c.lr_decay_per_epoch.powi(epoch as i32);
        for _ in 0..n_steps {
            let starts: Vec<usize> = (0..c.batch_windows).map(|_| rng.random_range(0..=t_len - len)).collect();
            let binds = window_bindings(&c, x_train, &starts, len, dropout, rng)?;
            let diverged = |reason: String| NsvmError::Diverged { epoch, step, reason };
            let (loss, grads) = wg
                .graph
                .backward_grad(loss_node, &(&binds, &model.params))
                .map_err(|e| diverged(e.to_string()))?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss}")));
            }
            let grads: TensorMap = grads.into_iter().filter(|(k, _)| model.params.contains_key(k)).collect();
            if grads.values().any(|g| !g.is_finite()) {
                return Err(diverged("non-finite gradient".into()));
            }
            adam.step(&mut model.params, &grads);
            log.rows.push(LogRow {
                epoch,
                step,
                loss,
                lr: adam.lr,
            });
            step += 1;
        }
    }
    Ok((model, log))
}

fn window_bindings(
    c: &NsvmConfig,
    x: &[Vec<f64>],
    starts: &[usize],
    len: usize,
    dropout: bool,
    rng: &mut impl Rng,
) -> Result<TensorMap, NsvmError> {
    let paths = c.train_paths;
    let rows = starts.len() * paths;
    let (m, l, h) = (c.obs_dim, c.latent_dim, c.hidden_dim);
    let mut binds = TensorMap::new();
    for t in 0..len {
        let mut data = Vec::with_capacity(rows * m);
        for &s in starts {
            for _ in 0..paths {
                data.extend_from_slice(&x[s + t]);
            }
        }
        binds.insert(format!("x.{t}"), Tensor::matrix(rows, m, data));
        binds.insert(format!("eps.{t}"), normal_matrix(rows, l, rng));
        if dropout {
            for cell in MASKED_CELLS {
                let width = match cell {
                    "fwd" | "bwd" => m,
                    "post" => l + 2 * h,
                    "z" => l,
                    _ => m + l,
                };
                let mask = dropout_mask(rows * width, c.dropout_rate, rng)?;
                binds.insert(format!("mask.{cell}.{t}"), Tensor::matrix(rows, width, mask));
            }
        }
    }
    Ok(binds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(obs: usize, latent: usize, hidden: usize, rank: usize) -> NsvmConfig {
        NsvmConfig {
            obs_dim: obs,
            latent_dim: latent,
            hidden_dim: hidden,
            covariance_rank: rank,
            dropout_rate: 0.0,
            l2_weight: 0.0,
            ..NsvmConfig::default()
        }
    }

    fn random_model(config: NsvmConfig, seed: u64) -> Nsvm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Nsvm::new(config, &mut rng).unwrap();
        // give biases some mass too
        for (name, t) in m.params.iter_mut() {
            if name.contains(".b") {
                for v in t.data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        m.factor_active = m.config.covariance_rank == 1;
        m
    }

    fn seq(seed: u64, t: usize, m: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t).map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn zero_prior_is_standard_normal() {
        let m = Nsvm::zeros(tiny(3, 2, 4, 0)).unwrap();
        let phi = m.generative().unwrap();
        let (h, mu, var) = prior_step(&phi, &[0.3, -0.2, 0.9, 0.0], &[1.0, -4.0]).unwrap();
        assert_eq!(mu, vec![0.0, 0.0]);
        assert_eq!(var, vec![1.0, 1.0]);
        assert_eq!(h.len(), 4);
    }

    #[test]
    fn prior_step_is_pure() {
        let m = random_model(tiny(3, 2, 4, 0), 1);
        let phi = m.generative().unwrap();
        let a = prior_step(&phi, &[0.1, 0.2, 0.3, 0.4], &[0.5, -0.5]).unwrap();
        let b = prior_step(&phi, &[0.1, 0.2, 0.3, 0.4], &[0.5, -0.5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prior_mean_gradient_matches_finite_differences() {
        let config = tiny(2, 2, 3, 0);
        let layout = Layout::new(&config);
        let m = random_model(config, 2);
        let mut g = Graph::new();
        let cell = layout.rnn_z.declare(&mut g);
        let h = g.input("h");
        let z = g.input("z");
        let h1 = cell.step(&mut g, h, z);
        let p = layout.head_z.apply(&mut g, h1);
        let loss = g.sum(p.mu);
        let mut binds = m.params.clone();
        binds.insert("h".into(), Tensor::vector(vec![0.2, -0.4, 0.1]));
        binds.insert("z".into(), Tensor::vector(vec![0.7, -1.1]));
        assert!(finite_diff_check(&g, loss, &binds, 1e-6).unwrap() < 1e-4);
    }

    #[test]
    fn zero_observation_model_is_standard_normal() {
        let m = Nsvm::zeros(tiny(3, 2, 4, 0)).unwrap();
        let phi = m.generative().unwrap();
        let (_, mu, cov) = obs_step(&phi, &[0.0; 4], &[1.0, 2.0, 3.0], &[0.5, 0.5]).unwrap();
        assert_eq!(mu, vec![0.0; 3]);
        assert_eq!(cov.covariance_diag(), vec![1.0; 3]);
        let (_, mu2, cov2) = obs_step(&phi, &[0.0; 4], &[1.0, 2.0, 3.0], &[-7.0, 9.0]).unwrap();
        assert_eq!((mu, cov.covariance()), (mu2, cov2.covariance()));
    }

    #[test]
    fn observation_model_depends_on_latent() {
        let config = tiny(2, 2, 3, 1);
        let layout = Layout::new(&config);
        let m = random_model(config, 3);
        let mut g = Graph::new();
        let cell = layout.rnn_x.declare(&mut g);
        let h = g.input("h");
        let xz = g.param("xz");
        let h1 = cell.step(&mut g, h, xz);
        let o = layout.head_x.apply(&mut g, h1);
        let a = g.sum(o.mu);
        let b = g.sum(o.log_var);
        let c = g.sum(o.factor.unwrap());
        let ab = g.add(a, b);
        let loss = g.add(ab, c);
        let mut binds = m.params.clone();
        binds.insert("h".into(), Tensor::vector(vec![0.1, 0.2, -0.3]));
        binds.insert("xz".into(), Tensor::vector(vec![0.5, -0.5, 0.3, 0.8]));
        let (_, grads) = g.backward_grad(loss, &binds).unwrap();
        // the latent entries are the last two
        let gz = &grads["xz"].data()[2..];
        assert!(gz.iter().any(|v| v.abs() > 1e-6), "{gz:?}");
        assert!(finite_diff_check(&g, loss, &binds, 1e-6).unwrap() < 1e-4);
    }

    #[test]
    fn zero_inference_draws_standard_normals() {
        let m = Nsvm::zeros(tiny(2, 3, 4, 0)).unwrap();
        let psi = m.inference().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = infer_paths(&psi, &seq(1, 5, 2), 3, &mut rng).unwrap();
        assert_eq!((batch.paths(), batch.steps()), (3, 5));
        for s in 0..3 {
            for t in 0..5 {
                assert_eq!(batch.mu[s][t], vec![0.0; 3]);
                assert_eq!(batch.var[s][t], vec![1.0; 3]);
                assert_eq!(batch.z[s][t], batch.eps[s][t]);
            }
        }
    }

    #[test]
    fn inference_is_deterministic_and_reparameterised() {
        let m = random_model(tiny(2, 2, 3, 0), 5);
        let psi = m.inference().unwrap();
        let x = seq(2, 6, 2);
        let a = infer_paths(&psi, &x, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = infer_paths(&psi, &x, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        for s in 0..4 {
            for t in 0..6 {
                for k in 0..2 {
                    let z = a.mu[s][t][k] + a.var[s][t][k].sqrt() * a.eps[s][t][k];
                    assert_eq!(a.z[s][t][k], z);
                }
            }
        }
    }

    #[test]
    fn posterior_sees_the_future() {
        let m = random_model(tiny(2, 2, 3, 0), 6);
        let psi = m.inference().unwrap();
        let mut x = seq(3, 5, 2);
        let a = infer_paths(&psi, &x, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        x[4][0] += 1.0;
        let b = infer_paths(&psi, &x, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d: f64 = a.mu[0][0].iter().zip(&b.mu[0][0]).map(|(p, q)| (p - q).abs()).sum();
        assert!(d > 1e-9, "{d}");
    }

    #[test]
    fn zero_model_elbo_examples() {
        let m = Nsvm::zeros(tiny(1, 1, 3, 0)).unwrap();
        let (phi, psi) = (m.generative().unwrap(), m.inference().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (x, want) in [(0.0, -0.918_938_533_204_672_8), (2.0, -2.918_938_533_204_672_8)] {
            let xs = vec![vec![x]];
            let paths = infer_paths(&psi, &xs, 5, &mut rng).unwrap();
            let per = elbo_paths(&phi, &psi, &xs, &paths).unwrap();
            for v in &per {
                assert!((v - want).abs() < 1e-12, "{v}");
            }
            let graph = m.elbo_paths_graph(&xs, &paths.eps).unwrap();
            for v in &graph {
                assert!((v - want).abs() < 1e-12, "{v}");
            }
        }
    }

    #[test]
    fn numeric_and_graph_elbo_agree() {
        for rank in [0, 1] {
            let m = random_model(tiny(2, 2, 3, rank), 10 + rank as u64);
            let (phi, psi) = (m.generative().unwrap(), m.inference().unwrap());
            let x = seq(4, 5, 2);
            let paths = infer_paths(&psi, &x, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let numeric = elbo_paths(&phi, &psi, &x, &paths).unwrap();
            let graph = m.elbo_paths_graph(&x, &paths.eps).unwrap();
            for (a, b) in numeric.iter().zip(&graph) {
                assert!((a - b).abs() < 1e-10 * a.abs().max(1.0), "rank {rank}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        for rank in [0, 1] {
            let config = NsvmConfig {
                l2_weight: 1e-2,
                ..tiny(2, 2, 3, rank)
            };
            let m = random_model(config.clone(), 20 + rank as u64);
            let x = seq(5, 4, 2);
            let wg = WindowGraph::build(&config, 4, 2, false, rank == 1, Mode::Score);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut binds = window_bindings(&NsvmConfig { train_paths: 2, ..config }, &x, &[0], 4, false, &mut rng).unwrap();
            binds.extend(m.params.clone());
            let err = finite_diff_check(&wg.graph, wg.loss.unwrap(), &binds, 1e-6).unwrap();
            assert!(err < 1e-4, "rank {rank}: {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_keeps_config() {
        let mut config = tiny(2, 2, 3, 1);
        config.learning_rate = 0.003;
        config.clamp_mu = true;
        let mut m = random_model(config, 30);
        m.factor_active = true;
        let dir = tempfile::tempdir().unwrap();
        for name in ["m.txt", "m.bin"] {
            let path = dir.path().join(name);
            m.save(&path).unwrap();
            assert_eq!(Nsvm::load(&path).unwrap(), m);
        }
    }

    #[test]
    fn checkpoint_missing_tensor_is_rejected() {
        let m = Nsvm::zeros(tiny(2, 2, 3, 0)).unwrap();
        let mut ck = m.to_checkpoint();
        ck.tensors.remove("phi.rnn_z.w_z");
        assert!(Nsvm::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn training_reduces_loss_on_sv_data() {
        let (x, _) = crate::garch::simulate_canonical_sv(
            &crate::garch::SvCanonicalParams {
                eta: 0.0,
                phi: 0.95,
                sigma_z: 0.3,
            },
            400,
            1,
        )
        .unwrap();
        let x: Vec<Vec<f64>> = x.into_iter().map(|v| vec![v]).collect();
        let config = NsvmConfig {
            obs_dim: 1,
            latent_dim: 1,
            hidden_dim: 6,
            window: 40,
            max_epochs: 20,
            learning_rate: 3e-3,
            lr_decay_per_epoch: 1.0,
            ..NsvmConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (_, log) = train(&config, &x, &mut rng).unwrap();
        assert_eq!(log.rows.len(), 200);
        let head: f64 = log.rows[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(log.tail_mean(20) < head, "{} vs {head}", log.tail_mean(20));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.append_csv(&path).unwrap();
        log.append_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,step,loss,lr\n"));
        assert_eq!(text.lines().count(), 401);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = TensorMap::new();
        params.insert("p".into(), Tensor::vector(vec![1.5, -2.0]));
        let before = params.clone();
        let mut grads = TensorMap::new();
        grads.insert("p".into(), Tensor::zeros(&[2]));
        Adam::new(1e-3).step(&mut params, &grads);
        assert_eq!(params, before);
    }

    #[test]
    fn corr_switch_turns_on_factor() {
        let config = NsvmConfig {
            max_epochs: 5,
            corr_switch: 0.6,
            window: 10,
            ..tiny(2, 1, 3, 1)
        };
        let x = seq(6, 30, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Nsvm::new(config.clone(), &mut rng).unwrap();
        let (early, _) = train_from(model.clone(), &x, 3, 0, &mut rng).unwrap();
        assert!(!early.factor_active);
        let (late, _) = train_from(model, &x, 5, 0, &mut rng).unwrap();
        assert!(late.factor_active);
        let comps = late.predict_next(&[&x[..10]], 4, &mut rng).unwrap();
        assert!(comps[0].factor.is_some());
    }

    #[test]
    fn divergence_is_reported() {
        let config = tiny(1, 1, 2, 0);
        let mut model = Nsvm::zeros(config).unwrap();
        model.params.insert("phi.head_x.b_var".into(), Tensor::vector(vec![-800.0]));
        let x = vec![vec![1.0]; 10];
        let err = train_from(model, &x, 1, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, NsvmError::Diverged { epoch: 0, step: 0, .. }), "{err}");
    }

    #[test]
    fn zero_model_predicts_standard_normal() {
        let m = Nsvm::zeros(tiny(2, 2, 3, 0)).unwrap();
        let x = seq(1, 8, 2);
        let comps = m
            .predict_next(&[&x[..5], &x[3..]], 4, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(comps.len(), 2);
        for c in comps {
            assert_eq!(c.mu, vec![vec![0.0; 2]; 4]);
            assert_eq!(c.var, vec![vec![1.0; 2]; 4]);
        }
    }
}
