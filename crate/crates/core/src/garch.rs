//! Deterministic conditional-variance models: the power-form family
//! (ARCH, GARCH, GJR, AVARCH, AVGARCH, TARCH), EGARCH, and the canonical
//! stochastic-volatility simulator used for synthetic benchmarks.
//!
//! Timing convention: `x[0..T]` are observations and the level (σ^d, or
//! log σ² for EGARCH) used to score `x[t]` depends on `x[..t]` only. The
//! level for `x[0]` is the pre-sample seed. Pre-sample `|x|^d` terms also
//! take the seed, pre-sample leverage terms take half of it (the expected
//! share of negative draws), and pre-sample EGARCH news terms are zero.
//!
//! EGARCH's news function is `g(x) = θx + γ(|x| − √(2/π))`, applied to the
//! raw observation. Applying it to `x/σ` would make the recursion depend on
//! the seed even when β is absent.

use std::f64::consts::FRAC_2_PI;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{bfgs, BfgsOptions};
use crate::tensor::{Graph, GraphError, NodeId, Tensor, TensorMap};

/// Minimum series length accepted by [`fit_mle`].
pub const MIN_FIT_LEN: usize = 20;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const SIM_BURN_IN: usize = 500;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GarchError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("pre-sample seed must be positive, got {0}")]
    NonPositiveInit(f64),
    #[error("empty observation sequence")]
    Empty,
    #[error("series of length {len} is shorter than the minimum {min}")]
    TooShort { len: usize, min: usize },
    #[error("calibration failed: series has zero variance")]
    ZeroVariance,
    #[error("calibration failed: likelihood is not finite at the starting point")]
    BadStart,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Power,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GarchSpec {
    pub family: Family,
    pub p: usize,
    pub o: usize,
    pub q: usize,
    /// Power of the power form; ignored by EGARCH.
    pub d: u8,
}

impl GarchSpec {
    pub fn power(p: usize, o: usize, q: usize, d: u8) -> Self {
        Self {
            family: Family::Power,
            p,
            o,
            q,
            d,
        }
    }
    pub fn arch(p: usize) -> Self {
        Self::power(p, 0, 0, 2)
    }
    pub fn garch(p: usize, q: usize) -> Self {
        Self::power(p, 0, q, 2)
    }
    pub fn gjr(p: usize, o: usize, q: usize) -> Self {
        Self::power(p, o, q, 2)
    }
    pub fn avarch(p: usize) -> Self {
        Self::power(p, 0, 0, 1)
    }
    pub fn avgarch(p: usize, q: usize) -> Self {
        Self::power(p, 0, q, 1)
    }
    pub fn tarch(p: usize, o: usize, q: usize) -> Self {
        Self::power(p, o, q, 1)
    }
    pub fn egarch(p: usize, q: usize) -> Self {
        Self {
            family: Family::Exponential,
            p,
            o: 0,
            q,
            d: 2,
        }
    }

    pub fn validate(&self) -> Result<(), GarchError> {
        if self.p == 0 {
            return Err(GarchError::Spec("p must be at least 1".into()));
        }
        if self.family == Family::Power && !matches!(self.d, 1 | 2) {
            return Err(GarchError::Spec(format!("d must be 1 or 2, got {}", self.d)));
        }
        Ok(())
    }

    fn abs_pow(&self, x: f64) -> f64 {
        if self.d == 1 {
            x.abs()
        } else {
            x * x
        }
    }

    /// Variance implied by a level value.
    pub fn level_to_variance(&self, level: f64) -> f64 {
        match (self.family, self.d) {
            (Family::Exponential, _) => level.exp(),
            (Family::Power, 1) => level * level,
            _ => level,
        }
    }

    /// Level value (σ^d, or log σ²) implied by a variance.
    pub fn variance_to_level(&self, var: f64) -> f64 {
        match (self.family, self.d) {
            (Family::Exponential, _) => var.ln(),
            (Family::Power, 1) => var.sqrt(),
            _ => var,
        }
    }
}

impl fmt::Display for GarchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (p, o, q) = (self.p, self.o, self.q);
        match (self.family, self.d) {
            (Family::Exponential, _) => write!(f, "egarch({p},{q})"),
            (Family::Power, 2) if o == 0 && q == 0 => write!(f, "arch({p})"),
            (Family::Power, 2) if o == 0 => write!(f, "garch({p},{q})"),
            (Family::Power, 2) => write!(f, "gjr({p},{o},{q})"),
            (Family::Power, _) if o == 0 && q == 0 => write!(f, "avarch({p})"),
            (Family::Power, _) if o == 0 => write!(f, "avgarch({p},{q})"),
            (Family::Power, _) => write!(f, "tarch({p},{o},{q})"),
        }
    }
}

impl FromStr for GarchSpec {
    type Err = GarchError;

    /// Parses `arch(p)`, `garch(p,q)`, `gjr(p,o,q)`, `avarch(p)`,
    /// `avgarch(p,q)`, `tarch(p,o,q)`, `egarch(p,q)` or `power(p,o,q,d)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GarchError::Spec(format!("cannot parse model `{s}`"));
        let s = s.trim().to_ascii_lowercase();
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let n: Vec<usize> = args
            .split(',')
            .map(|a| a.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        let spec = match (name.trim(), n.as_slice()) {
            ("arch", [p]) => Self::arch(*p),
            ("garch", [p, q]) => Self::garch(*p, *q),
            ("gjr", [p, o, q]) => Self::gjr(*p, *o, *q),
            ("avarch", [p]) => Self::avarch(*p),
            ("avgarch", [p, q]) => Self::avgarch(*p, *q),
            ("tarch", [p, o, q]) => Self::tarch(*p, *o, *q),
            ("egarch", [p, q]) => Self::egarch(*p, *q),
            ("power", [p, o, q, d]) => Self::power(*p, *o, *q, u8::try_from(*d).map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub alpha0: f64,
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub gamma_lev: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub gamma_g: f64,
}

impl GarchParams {
    pub fn validate(&self, spec: &GarchSpec) -> Result<(), GarchError> {
        spec.validate()?;
        let o = if spec.family == Family::Power { spec.o } else { 0 };
        if self.alpha.len() != spec.p || self.beta.len() != spec.q || self.gamma_lev.len() != o {
            return Err(GarchError::Params(format!(
                "{spec} expects {} alpha, {} gamma, {} beta; got {}, {}, {}",
                spec.p,
                o,
                spec.q,
                self.alpha.len(),
                self.gamma_lev.len(),
                self.beta.len()
            )));
        }
        let all = [self.alpha0, self.theta, self.gamma_g]
            .into_iter()
            .chain(self.alpha.iter().copied())
            .chain(self.beta.iter().copied())
            .chain(self.gamma_lev.iter().copied());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(GarchError::Params("non-finite coefficient".into()));
        }
        if spec.family == Family::Power {
            if self.alpha0 <= 0.0 {
                return Err(GarchError::Params(format!("alpha0 must be positive, got {}", self.alpha0)));
            }
            if self.alpha.iter().chain(&self.beta).any(|&v| v < 0.0) {
                return Err(GarchError::Params("alpha and beta must be nonnegative".into()));
            }
            for (k, g) in self.gamma_lev.iter().enumerate() {
                if self.alpha.get(k).copied().unwrap_or(0.0) + g < 0.0 {
                    return Err(GarchError::Params(format!("alpha_{0} + gamma_{0} is negative", k + 1)));
                }
            }
        }
        Ok(())
    }

    /// Σα + Σβ + ½Σγ, scaled by E|ε| for absolute-value models.
    pub fn persistence(&self, spec: &GarchSpec) -> f64 {
        let b: f64 = self.beta.iter().sum();
        match spec.family {
            Family::Exponential => b,
            Family::Power => {
                let shock = self.alpha.iter().sum::<f64>() + 0.5 * self.gamma_lev.iter().sum::<f64>();
                let scale = if spec.d == 1 { FRAC_2_PI.sqrt() } else { 1.0 };
                scale * shock + b
            }
        }
    }

    /// Long-run level (σ^d or log σ²), or `None` when non-stationary.
    pub fn unconditional_level(&self, spec: &GarchSpec) -> Option<f64> {
        let rho = self.persistence(spec);
        (rho.abs() < 1.0).then(|| self.alpha0 / (1.0 - rho))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvCanonicalParams {
    pub eta: f64,
    pub phi: f64,
    pub sigma_z: f64,
}

/// Rolling state of a level recursion.
struct Recursion<'a> {
    spec: GarchSpec,
    params: &'a GarchParams,
    shocks: Vec<f64>,
    leverage: Vec<f64>,
    levels: Vec<f64>,
}

impl<'a> Recursion<'a> {
    fn new(spec: GarchSpec, params: &'a GarchParams, init: f64) -> Self {
        let lags = spec.p.max(spec.o);
        let (shock0, lev0) = match spec.family {
            Family::Power => (init, 0.5 * init),
            Family::Exponential => (0.0, 0.0),
        };
        Self {
            spec,
            params,
            shocks: vec![shock0; lags],
            leverage: vec![lev0; lags],
            levels: vec![init; spec.q.max(1)],
        }
    }

    /// Level for the next observation.
    fn current(&self) -> f64 {
        *self.levels.last().expect("seeded")
    }

    fn push(&mut self, x: f64) -> f64 {
        let p = self.params;
        match self.spec.family {
            Family::Power => {
                let a = self.spec.abs_pow(x);
                self.shocks.push(a);
                self.leverage.push(if x < 0.0 { a } else { 0.0 });
            }
            Family::Exponential => {
                let g = p.theta * x + p.gamma_g * (x.abs() - FRAC_2_PI.sqrt());
                self.shocks.push(g);
            }
        }
        let (ns, nl, nv) = (self.shocks.len(), self.leverage.len(), self.levels.len());
        let mut s = p.alpha0;
        for (i, a) in p.alpha.iter().enumerate() {
            s += a * self.shocks[ns - 1 - i];
        }
        for (k, g) in p.gamma_lev.iter().enumerate() {
            s += g * self.leverage[nl - 1 - k];
        }
        for (j, b) in p.beta.iter().enumerate() {
            s += b * self.levels[nv - 1 - j];
        }
        self.levels.push(s);
        s
    }
}

/// Power-form recursion. Returns σ^d for the step after each observation:
/// `out[t]` depends on `x[..=t]`.
pub fn variance_recursion(
    spec: &GarchSpec,
    params: &GarchParams,
    x: &[f64],
    sigma_d_init: f64,
) -> Result<Vec<f64>, GarchError> {
    if spec.family != Family::Power {
        return Err(GarchError::Spec(format!("{spec} is not a power-form model")));
    }
    params.validate(spec)?;
    if !(sigma_d_init > 0.0) {
        return Err(GarchError::NonPositiveInit(sigma_d_init));
    }
    if x.is_empty() {
        return Err(GarchError::Empty);
    }
    let mut rec = Recursion::new(*spec, params, sigma_d_init);
    Ok(x.iter().map(|&v| rec.push(v)).collect())
}

/// EGARCH recursion with lags taken from the coefficient vectors. Returns
/// log σ² for the step after each observation.
pub fn egarch_recursion(params: &GarchParams, x: &[f64], log_var_init: f64) -> Vec<f64> {
    let spec = GarchSpec::egarch(params.alpha.len(), params.beta.len());
    let mut rec = Recursion::new(spec, params, log_var_init);
    x.iter().map(|&v| rec.push(v)).collect()
}

/// Population variance (divisor n).
pub fn sample_variance(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Conditional variances aligned with the observations, plus one-step-ahead
/// variance at the end: `T + 1` values, the first being `init_var`.
pub fn conditional_variances(
    spec: &GarchSpec,
    params: &GarchParams,
    x: &[f64],
    init_var: f64,
) -> Result<Vec<f64>, GarchError> {
    params.validate(spec)?;
    if !(init_var > 0.0) || !init_var.is_finite() {
        return Err(GarchError::NonPositiveInit(init_var));
    }
    let mut rec = Recursion::new(*spec, params, spec.variance_to_level(init_var));
    let mut out = Vec::with_capacity(x.len() + 1);
    out.push(spec.level_to_variance(rec.current()));
    for &v in x {
        out.push(spec.level_to_variance(rec.push(v)));
    }
    Ok(out)
}

fn gaussian_nll(x: f64, var: f64) -> f64 {
    HALF_LN_2PI + 0.5 * var.ln() + 0.5 * x * x / var
}

/// Mean Gaussian NLL with the pre-sample seed set to the sample variance.
pub fn garch_nll(spec: &GarchSpec, params: &GarchParams, x: &[f64]) -> Result<f64, GarchError> {
    let v = sample_variance(x);
    if !(v > 0.0) {
        return Err(GarchError::ZeroVariance);
    }
    garch_nll_with_init(spec, params, x, v)
}

pub fn garch_nll_with_init(
    spec: &GarchSpec,
    params: &GarchParams,
    x: &[f64],
    init_var: f64,
) -> Result<f64, GarchError> {
    if x.is_empty() {
        return Err(GarchError::Empty);
    }
    let vars = conditional_variances(spec, params, x, init_var)?;
    let total: f64 = x.iter().zip(&vars).map(|(&xt, &v)| gaussian_nll(xt, v)).sum();
    Ok(total / x.len() as f64)
}

/// Result of a maximum-likelihood calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchFit {
    pub spec: GarchSpec,
    pub params: GarchParams,
    pub nll: f64,
    pub init_var: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl GarchFit {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fit record serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Unconstrained parameter block in the likelihood graph.
#[derive(Debug, Clone)]
struct Block {
    name: &'static str,
    len: usize,
    scalar: bool,
}

/// Mean NLL as a function of unconstrained coordinates, built once per
/// series. Power-form coefficients are exponentials of the coordinates,
/// with `γ_k = exp(w_k) − α_k`; EGARCH coordinates are the raw
/// coefficients with `α_1` pinned to 1 (the news scale lives in θ and γ).
struct Likelihood {
    spec: GarchSpec,
    graph: Graph,
    loss: NodeId,
    blocks: Vec<Block>,
}

fn lag_matrix(rows: usize, lags: usize, value: impl Fn(isize) -> f64) -> Tensor {
    let mut data = Vec::with_capacity(rows * lags);
    for t in 0..rows {
        for i in 0..lags {
            data.push(value(t as isize - i as isize));
        }
    }
    Tensor::matrix(rows, lags, data)
}

impl Likelihood {
    fn new(spec: GarchSpec, x: &[f64], init_var: f64) -> Self {
        let n = x.len();
        let rows = n - 1;
        let init = spec.variance_to_level(init_var);
        let mut g = Graph::new();
        let mut blocks = Vec::new();
        let mut block = |g: &mut Graph, name: &'static str, len: usize, scalar: bool| {
            blocks.push(Block { name, len, scalar });
            g.param(name)
        };
        let drive = match spec.family {
            Family::Power => {
                let shocks: Vec<f64> = x.iter().map(|&v| spec.abs_pow(v)).collect();
                let a0 = block(&mut g, "a0", 1, true);
                let a0 = g.exp(a0);
                let ua = block(&mut g, "alpha", spec.p, false);
                let alpha = g.exp(ua);
                let lags = g.constant(lag_matrix(rows, spec.p, |s| {
                    if s >= 0 { shocks[s as usize] } else { init }
                }));
                let news = g.matmul(lags, alpha);
                let mut drive = g.add(news, a0);
                if spec.o > 0 {
                    let ug = block(&mut g, "gamma", spec.o, false);
                    let eg = g.exp(ug);
                    let mut sel = vec![0.0; spec.o * spec.p];
                    for k in 0..spec.o.min(spec.p) {
                        sel[k * spec.p + k] = 1.0;
                    }
                    let sel = g.constant(Tensor::matrix(spec.o, spec.p, sel));
                    let shared = g.matmul(sel, alpha);
                    let gamma = g.sub(eg, shared);
                    let lev = g.constant(lag_matrix(rows, spec.o, |s| {
                        if s < 0 {
                            0.5 * init
                        } else if x[s as usize] < 0.0 {
                            shocks[s as usize]
                        } else {
                            0.0
                        }
                    }));
                    let lev = g.matmul(lev, gamma);
                    drive = g.add(drive, lev);
                }
                drive
            }
            Family::Exponential => {
                let a0 = block(&mut g, "a0", 1, true);
                let theta = block(&mut g, "theta", 1, true);
                let gamma = block(&mut g, "gamma_g", 1, true);
                let mut alpha = g.constant(Tensor::vector(vec![1.0]));
                if spec.p > 1 {
                    let rest = block(&mut g, "alpha", spec.p - 1, false);
                    alpha = g.concat(&[alpha, rest]);
                }
                let c = FRAC_2_PI.sqrt();
                let signed = g.constant(lag_matrix(rows, spec.p, |s| {
                    if s >= 0 { x[s as usize] } else { 0.0 }
                }));
                let sized = g.constant(lag_matrix(rows, spec.p, |s| {
                    if s >= 0 { x[s as usize].abs() - c } else { 0.0 }
                }));
                let signed = g.matmul(signed, alpha);
                let sized = g.matmul(sized, alpha);
                let signed = g.mul(signed, theta);
                let sized = g.mul(sized, gamma);
                let news = g.add(signed, sized);
                g.add(news, a0)
            }
        };
        let level = if spec.q > 0 {
            let ub = block(&mut g, "beta", spec.q, false);
            let beta = match spec.family {
                Family::Power => g.exp(ub),
                Family::Exponential => ub,
            };
            let seed = g.constant(Tensor::scalar(init));
            g.recurrence(drive, beta, seed)
        } else {
            drive
        };
        let var = match (spec.family, spec.d) {
            (Family::Exponential, _) => g.exp(level),
            (Family::Power, 1) => g.square(level),
            _ => level,
        };
        let x2 = g.constant(Tensor::vector(x[1..].iter().map(|v| v * v).collect()));
        let log_var = g.log(var);
        let ratio = g.div(x2, var);
        let terms = g.add(log_var, ratio);
        let total = g.sum(terms);
        let half = g.scale(total, 0.5);
        let fixed = n as f64 * HALF_LN_2PI + 0.5 * init_var.ln() + 0.5 * x[0] * x[0] / init_var;
        let shifted = g.offset(half, fixed);
        let loss = g.scale(shifted, 1.0 / n as f64);
        Self {
            spec,
            graph: g,
            loss,
            blocks,
        }
    }

    fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    fn bind(&self, u: &[f64]) -> TensorMap {
        let mut map = TensorMap::new();
        let mut at = 0;
        for b in &self.blocks {
            let t = if b.scalar {
                Tensor::scalar(u[at])
            } else {
                Tensor::vector(u[at..at + b.len].to_vec())
            };
            map.insert(b.name.to_string(), t);
            at += b.len;
        }
        map
    }

    fn eval(&self, u: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (value, grads) = self.graph.backward_grad(self.loss, &self.bind(u)).ok()?;
        let flat = self
            .blocks
            .iter()
            .flat_map(|b| grads[b.name].data().to_vec())
            .collect();
        Some((value, flat))
    }

    fn get<'u>(&self, u: &'u [f64], name: &str) -> &'u [f64] {
        let mut at = 0;
        for b in &self.blocks {
            if b.name == name {
                return &u[at..at + b.len];
            }
            at += b.len;
        }
        &[]
    }

    fn decode(&self, u: &[f64]) -> GarchParams {
        let spec = self.spec;
        match spec.family {
            Family::Power => {
                let alpha: Vec<f64> = self.get(u, "alpha").iter().map(|v| v.exp()).collect();
                let gamma_lev = self
                    .get(u, "gamma")
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w.exp() - alpha.get(k).copied().unwrap_or(0.0))
                    .collect();
                GarchParams {
                    alpha0: self.get(u, "a0")[0].exp(),
                    alpha,
                    gamma_lev,
                    beta: self.get(u, "beta").iter().map(|v| v.exp()).collect(),
                    theta: 0.0,
                    gamma_g: 0.0,
                }
            }
            Family::Exponential => {
                let mut alpha = vec![1.0];
                alpha.extend_from_slice(self.get(u, "alpha"));
                GarchParams {
                    alpha0: self.get(u, "a0")[0],
                    alpha,
                    gamma_lev: Vec::new(),
                    beta: self.get(u, "beta").to_vec(),
                    theta: self.get(u, "theta")[0],
                    gamma_g: self.get(u, "gamma_g")[0],
                }
            }
        }
    }

    fn encode(&self, params: &GarchParams) -> Vec<f64> {
        let floor = |v: f64| v.max(1e-8).ln();
        let mut u = Vec::with_capacity(self.dim());
        // EGARCH: fold α_1 into the news coefficients
        let scale = params.alpha.first().copied().filter(|a| *a != 0.0).unwrap_or(1.0);
        for b in &self.blocks {
            match (self.spec.family, b.name) {
                (Family::Power, "a0") => u.push(floor(params.alpha0)),
                (Family::Power, "alpha") => u.extend(params.alpha.iter().map(|&v| floor(v))),
                (Family::Power, "gamma") => u.extend(
                    params
                        .gamma_lev
                        .iter()
                        .enumerate()
                        .map(|(k, g)| floor(g + params.alpha.get(k).copied().unwrap_or(0.0))),
                ),
                (Family::Power, "beta") => u.extend(params.beta.iter().map(|&v| floor(v))),
                (Family::Exponential, "a0") => u.push(params.alpha0),
                (Family::Exponential, "theta") => u.push(params.theta * scale),
                (Family::Exponential, "gamma_g") => u.push(params.gamma_g * scale),
                (Family::Exponential, "alpha") => u.extend(params.alpha[1..].iter().map(|a| a / scale)),
                (Family::Exponential, "beta") => u.extend_from_slice(&params.beta),
                _ => unreachable!("unknown block {}", b.name),
            }
        }
        u
    }
}

/// Generic starting point for a calibration.
pub fn default_start(spec: &GarchSpec, init_var: f64) -> GarchParams {
    let beta = if spec.q > 0 { vec![0.8 / spec.q as f64; spec.q] } else { Vec::new() };
    let b: f64 = beta.iter().sum();
    match spec.family {
        Family::Power => {
            let alpha = vec![0.1 / spec.p as f64; spec.p];
            let gamma_lev = vec![0.05 / spec.o.max(1) as f64; spec.o];
            let params = GarchParams {
                alpha0: 1.0,
                alpha,
                gamma_lev,
                beta,
                theta: 0.0,
                gamma_g: 0.0,
            };
            let rho = params.persistence(spec);
            GarchParams {
                alpha0: spec.variance_to_level(init_var) * (1.0 - rho).max(0.05),
                ..params
            }
        }
        Family::Exponential => {
            let mut alpha = vec![0.0; spec.p];
            alpha[0] = 1.0;
            GarchParams {
                alpha0: init_var.ln() * (1.0 - b),
                alpha,
                gamma_lev: Vec::new(),
                beta,
                theta: 0.0,
                gamma_g: 0.1,
            }
        }
    }
}

/// Maximum-likelihood calibration with the default optimizer settings.
pub fn fit_mle(spec: &GarchSpec, x: &[f64], init: Option<&GarchParams>) -> Result<GarchFit, GarchError> {
    fit_mle_with(spec, x, init, BfgsOptions::default())
}

/// Maximum-likelihood calibration by BFGS on unconstrained coordinates. The
/// pre-sample seed is the sample variance of `x`. A non-converged run still
/// returns its best iterate, with `converged == false`.
pub fn fit_mle_with(
    spec: &GarchSpec,
    x: &[f64],
    init: Option<&GarchParams>,
    opts: BfgsOptions,
) -> Result<GarchFit, GarchError> {
    spec.validate()?;
    if x.len() < MIN_FIT_LEN {
        return Err(GarchError::TooShort {
            len: x.len(),
            min: MIN_FIT_LEN,
        });
    }
    let init_var = sample_variance(x);
    if !(init_var > 1e-300) || !init_var.is_finite() {
        return Err(GarchError::ZeroVariance);
    }
    let start = match init {
        Some(p) => {
            p.validate(spec)?;
            p.clone()
        }
        None => default_start(spec, init_var),
    };
    let start_nll = garch_nll_with_init(spec, &start, x, init_var).ok().filter(|v| v.is_finite());
    let lik = Likelihood::new(*spec, x, init_var);
    let u0 = lik.encode(&start);
    let best = bfgs(|u| lik.eval(u), &u0, opts);
    let candidate = best.and_then(|m| {
        let params = lik.decode(&m.x);
        let nll = garch_nll_with_init(spec, &params, x, init_var).ok()?;
        nll.is_finite().then_some((params, nll, m.converged, m.iterations))
    });
    let fit = |params, nll, converged, iterations| GarchFit {
        spec: *spec,
        params,
        nll,
        init_var,
        converged,
        iterations,
    };
    match (candidate, start_nll) {
        (Some((params, nll, conv, it)), Some(s)) if nll <= s => Ok(fit(params, nll, conv, it)),
        (Some((params, nll, conv, it)), None) => Ok(fit(params, nll, conv, it)),
        (_, Some(s)) => Ok(fit(start, s, false, 0)),
        (None, None) => Err(GarchError::BadStart),
    }
}

/// Simulated series with the conditional variance used for each draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub x: Vec<f64>,
    pub sigma_sq: Vec<f64>,
    /// False when the parameters fail the stationarity condition; the
    /// series is still produced.
    pub stationary: bool,
}

/// Draws `T` observations after a burn-in, starting from the long-run level
/// (or `alpha0` for non-stationary parameters).
pub fn simulate_garch(
    spec: &GarchSpec,
    params: &GarchParams,
    t_len: usize,
    seed: u64,
) -> Result<Simulation, GarchError> {
    params.validate(spec)?;
    let long_run = params.unconditional_level(spec);
    let stationary = long_run.is_some();
    let init = long_run.unwrap_or(params.alpha0);
    if spec.family == Family::Power && !(init > 0.0) {
        return Err(GarchError::NonPositiveInit(init));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rec = Recursion::new(*spec, params, init);
    let mut x = Vec::with_capacity(t_len);
    let mut sigma_sq = Vec::with_capacity(t_len);
    for step in 0..SIM_BURN_IN + t_len {
        let var = spec.level_to_variance(rec.current());
        let eps: f64 = StandardNormal.sample(&mut rng);
        let xt = var.sqrt() * eps;
        if step >= SIM_BURN_IN {
            x.push(xt);
            sigma_sq.push(var);
        }
        rec.push(xt);
    }
    Ok(Simulation { x, sigma_sq, stationary })
}

/// Canonical SV: AR(1) log-variance started from its stationary law.
/// Returns `(x, log_var)`.
pub fn simulate_canonical_sv(
    params: &SvCanonicalParams,
    t_len: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>), GarchError> {
    let SvCanonicalParams { eta, phi, sigma_z } = *params;
    if !(phi.abs() < 1.0) {
        return Err(GarchError::Params(format!("|phi| must be below 1, got {phi}")));
    }
    if !(sigma_z > 0.0) {
        return Err(GarchError::Params(format!("sigma_z must be positive, got {sigma_z}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut h = eta + sigma_z / (1.0 - phi * phi).sqrt() * draw();
    let mut x = Vec::with_capacity(t_len);
    let mut log_var = Vec::with_capacity(t_len);
    for t in 0..t_len {
        if t > 0 {
            h = eta + phi * (h - eta) + sigma_z * draw();
        }
        x.push((0.5 * h).exp() * draw());
        log_var.push(h);
    }
    Ok((x, log_var))
}

/// Mean Gaussian NLL under the constant variance `var`.
pub fn constant_nll(x: &[f64], var: f64) -> f64 {
    x.iter().map(|&v| gaussian_nll(v, var)).sum::<f64>() / x.len() as f64
}
