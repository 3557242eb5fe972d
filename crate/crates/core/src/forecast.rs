//! Recursive one-step-ahead forecasting.
//!
//! Every model is driven through the [`Forecaster`] trait so that NSVM and
//! the GARCH-family baselines see identical histories and realized values.
//! A prediction is a [`PredictiveMixture`]: an equally weighted set of
//! Gaussians (one per sample path for NSVM, a single one for baselines).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariance::{CovarianceError, LowRankGaussian};
use crate::garch::{self, GarchError, GarchFit, GarchSpec};
use crate::nsvm::{train_from, Nsvm, NsvmError, PathComponents, TrainingLog};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("empty mixture")]
    EmptyMixture,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("history too short: need at least {min} observations, got {len}")]
    TooShort { len: usize, min: usize },
    #[error("invalid forecast options: {0}")]
    Options(String),
    #[error("non-finite parameters in {0}")]
    NonFinite(String),
    #[error("{model}: {source}")]
    Nsvm {
        model: String,
        #[source]
        source: NsvmError,
    },
    #[error("{model}: {source}")]
    Garch {
        model: String,
        #[source]
        source: GarchError,
    },
    #[error(transparent)]
    Covariance(#[from] CovarianceError),
    #[error("writing {path}: {message}")]
    Output { path: String, message: String },
}

/// Equally weighted Gaussian mixture over the next observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMixture {
    means: Vec<Vec<f64>>,
    covs: Vec<LowRankGaussian>,
}

impl PredictiveMixture {
    pub fn new(components: Vec<(Vec<f64>, LowRankGaussian)>) -> Result<Self, ForecastError> {
        let Some((first, _)) = components.first() else {
            return Err(ForecastError::EmptyMixture);
        };
        let dim = first.len();
        for (mu, cov) in &components {
            if mu.len() != dim || cov.dim() != dim {
                return Err(ForecastError::Dimension(format!(
                    "component of dimension {}/{} in a mixture of dimension {dim}",
                    mu.len(),
                    cov.dim()
                )));
            }
        }
        let (means, covs) = components.into_iter().unzip();
        Ok(Self { means, covs })
    }

    /// A single diagonal Gaussian.
    pub fn diagonal(mean: Vec<f64>, var: &[f64]) -> Result<Self, ForecastError> {
        Self::new(vec![(mean, LowRankGaussian::diagonal(var)?)])
    }

    fn from_paths(c: &PathComponents) -> Result<Self, ForecastError> {
        let comps = (0..c.mu.len())
            .map(|s| {
                let col = c.factor.as_ref().map(|f| f[s].as_slice());
                Ok((c.mu[s].clone(), LowRankGaussian::from_variance_and_column(&c.var[s], col)?))
            })
            .collect::<Result<Vec<_>, CovarianceError>>()?;
        Self::new(comps)
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[LowRankGaussian] {
        &self.covs
    }

    /// Log-density at `x`, stabilised by log-sum-exp.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64, ForecastError> {
        if x.len() != self.dim() {
            return Err(ForecastError::Dimension(format!(
                "observation of length {} for a mixture of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let logs = self
            .means
            .iter()
            .zip(&self.covs)
            .map(|(mu, cov)| cov.log_pdf(x, mu))
            .collect::<Result<Vec<_>, _>>()?;
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Ok(top);
        }
        let s: f64 = logs.iter().map(|l| (l - top).exp()).sum();
        Ok(top + (s * self.weight()).ln())
    }

    /// Draws one observation.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Vec<f64>, ForecastError> {
        let k = rng.random_range(0..self.len());
        let eps: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect();
        Ok(self.covs[k].sample(&self.means[k], &eps)?)
    }
}

/// Exact per-dimension mean and variance of a mixture.
pub fn mixture_moments(m: &PredictiveMixture) -> (Vec<f64>, Vec<f64>) {
    let dim = m.dim();
    let w = m.weight();
    let mut mean = vec![0.0; dim];
    let mut second = vec![0.0; dim];
    for (mu, cov) in m.means.iter().zip(&m.covs) {
        let diag = cov.covariance_diag();
        for i in 0..dim {
            mean[i] += w * mu[i];
            second[i] += w * (mu[i] * mu[i] + diag[i]);
        }
    }
    let var = (0..dim).map(|i| (second[i] - mean[i] * mean[i]).max(0.0)).collect();
    (mean, var)
}

/// Per-dimension sample mean and variance of `draws` mixture samples.
pub fn sampled_moments(
    m: &PredictiveMixture,
    draws: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>), ForecastError> {
    if draws < 2 {
        return Err(ForecastError::Options("sampled moments need at least two draws".into()));
    }
    let dim = m.dim();
    let (mut s1, mut s2) = (vec![0.0; dim], vec![0.0; dim]);
    for _ in 0..draws {
        let x = m.sample(rng)?;
        for i in 0..dim {
            s1[i] += x[i];
            s2[i] += x[i] * x[i];
        }
    }
    let n = draws as f64;
    let mean: Vec<f64> = s1.iter().map(|s| s / n).collect();
    let var = (0..dim).map(|i| (s2[i] / n - mean[i] * mean[i]).max(0.0)).collect();
    Ok((mean, var))
}

/// Negative log predictive density of `x_next`.
pub fn mixture_nll(m: &PredictiveMixture, x_next: &[f64]) -> Result<f64, ForecastError> {
    Ok(-m.log_pdf(x_next)?)
}

/// One-step predictive mixture from an NSVM: `paths` posterior trajectories
/// over the last `context` observations of `x_hist` (all of it when
/// `context` is `None`), each extended one step through the latent prior
/// and mapped through the observation model.
pub fn predict_one_step(
    model: &Nsvm,
    x_hist: &[Vec<f64>],
    context: Option<usize>,
    paths: usize,
    rng: &mut impl Rng,
) -> Result<PredictiveMixture, ForecastError> {
    if x_hist.is_empty() {
        return Err(ForecastError::TooShort { len: 0, min: 1 });
    }
    check_finite(model)?;
    let start = context.map_or(0, |c| x_hist.len().saturating_sub(c.max(1)));
    let comps = model
        .predict_next(&[&x_hist[start..]], paths, rng)
        .map_err(|source| ForecastError::Nsvm {
            model: "nsvm".into(),
            source,
        })?;
    PredictiveMixture::from_paths(&comps[0])
}

fn check_finite(model: &Nsvm) -> Result<(), ForecastError> {
    match model.params.iter().find(|(_, t)| !t.is_finite()) {
        Some((name, _)) => Err(ForecastError::NonFinite(name.clone())),
        None => Ok(()),
    }
}

/// A model that can be driven through the rolling loop.
pub trait Forecaster {
    fn name(&self) -> String;

    /// Predictive distribution of `x[end]` given `x[..end]`. Implementations
    /// must not read `x[end..]`.
    fn predict(&mut self, x: &[Vec<f64>], end: usize) -> Result<PredictiveMixture, ForecastError>;

    /// Several predictions against the same state, in order.
    fn predict_many(&mut self, x: &[Vec<f64>], ends: &[usize]) -> Result<Vec<PredictiveMixture>, ForecastError> {
        ends.iter().map(|&e| self.predict(x, e)).collect()
    }

    /// Refits on `x` (all of it is history).
    fn retrain(&mut self, x: &[Vec<f64>]) -> Result<(), ForecastError>;

    fn training_log(&self) -> Option<TrainingLog> {
        None
    }
}

/// Gaussian with the training mean and (population) variance per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantForecaster {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ConstantForecaster {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self, ForecastError> {
        let Some(first) = x.first() else {
            return Err(ForecastError::TooShort { len: 0, min: 2 });
        };
        let dim = first.len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|i| x.iter().map(|r| r[i]).sum::<f64>() / n).collect();
        let var: Vec<f64> = (0..dim)
            .map(|i| x.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / n)
            .collect();
        if var.iter().any(|v| !(*v > 0.0)) {
            return Err(ForecastError::Garch {
                model: "constant".into(),
                source: GarchError::ZeroVariance,
            });
        }
        Ok(Self { mean, var })
    }
}

impl Forecaster for ConstantForecaster {
    fn name(&self) -> String {
        "constant".into()
    }

    fn predict(&mut self, _x: &[Vec<f64>], _end: usize) -> Result<PredictiveMixture, ForecastError> {
        PredictiveMixture::diagonal(self.mean.clone(), &self.var)
    }

    fn retrain(&mut self, x: &[Vec<f64>]) -> Result<(), ForecastError> {
        *self = Self::fit(x)?;
        Ok(())
    }
}

/// One univariate GARCH-family fit per dimension, zero mean, combined into
/// a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GarchForecaster {
    pub spec: GarchSpec,
    pub fits: Vec<GarchFit>,
}

impl GarchForecaster {
    pub fn fit(spec: GarchSpec, x: &[Vec<f64>]) -> Result<Self, ForecastError> {
        let mut me = Self { spec, fits: Vec::new() };
        me.refit(x)?;
        Ok(me)
    }

    fn wrap(&self, source: GarchError) -> ForecastError {
        ForecastError::Garch {
            model: self.spec.to_string(),
            source,
        }
    }

    fn refit(&mut self, x: &[Vec<f64>]) -> Result<(), ForecastError> {
        let dim = x.first().map_or(0, Vec::len);
        let mut fits = Vec::with_capacity(dim);
        for i in 0..dim {
            let col: Vec<f64> = x.iter().map(|r| r[i]).collect();
            let warm = self.fits.get(i).map(|f| &f.params);
            fits.push(garch::fit_mle(&self.spec, &col, warm).map_err(|e| self.wrap(e))?);
        }
        self.fits = fits;
        Ok(())
    }
}

impl Forecaster for GarchForecaster {
    fn name(&self) -> String {
        self.spec.to_string()
    }

    fn predict(&mut self, x: &[Vec<f64>], end: usize) -> Result<PredictiveMixture, ForecastError> {
        Ok(self.predict_many(x, &[end])?.remove(0))
    }

    fn predict_many(&mut self, x: &[Vec<f64>], ends: &[usize]) -> Result<Vec<PredictiveMixture>, ForecastError> {
        let Some(&last) = ends.iter().max() else {
            return Ok(Vec::new());
        };
        let mut per_dim = Vec::with_capacity(self.fits.len());
        for (i, fit) in self.fits.iter().enumerate() {
            let col: Vec<f64> = x[..last].iter().map(|r| r[i]).collect();
            let var = garch::conditional_variances(&self.spec, &fit.params, &col, fit.init_var)
                .map_err(|e| self.wrap(e))?;
            per_dim.push(var);
        }
        ends.iter()
            .map(|&e| {
                let var: Vec<f64> = per_dim.iter().map(|v| v[e]).collect();
                PredictiveMixture::diagonal(vec![0.0; var.len()], &var)
            })
            .collect()
    }

    fn retrain(&mut self, x: &[Vec<f64>]) -> Result<(), ForecastError> {
        self.refit(x)
    }
}

/// NSVM driven through the rolling loop.
#[derive(Debug, Clone)]
pub struct NsvmForecaster {
    pub label: String,
    pub model: Nsvm,
    pub paths: usize,
    /// Observations fed to the inference network before each prediction.
    pub context: usize,
    /// Epochs per retraining round.
    pub retrain_epochs: usize,
    /// Training log accumulated across the initial fit and retraining.
    pub log: TrainingLog,
    epochs_done: usize,
    rng: ChaCha8Rng,
}

/// Upper bound on stacked rows per prediction graph.
const MAX_PREDICT_ROWS: usize = 1000;

impl NsvmForecaster {
    /// Wraps a trained model. Retraining continues the epoch count from
    /// `config.max_epochs` and uses a tenth of that budget per round.
    pub fn new(label: &str, model: Nsvm, log: TrainingLog, seed: u64) -> Self {
        let c = &model.config;
        Self {
            label: label.into(),
            paths: c.sample_paths,
            context: c.window,
            retrain_epochs: c.max_epochs.div_ceil(10).max(1),
            epochs_done: c.max_epochs,
            model,
            log,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Trains a fresh model on `x` and wraps it.
    pub fn train(label: &str, config: &crate::nsvm::NsvmConfig, x: &[Vec<f64>], seed: u64) -> Result<Self, ForecastError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, log) = crate::nsvm::train(config, x, &mut rng).map_err(|source| ForecastError::Nsvm {
            model: label.into(),
            source,
        })?;
        Ok(Self::new(label, model, log, seed.wrapping_add(1)))
    }

    fn wrap(&self, source: NsvmError) -> ForecastError {
        ForecastError::Nsvm {
            model: self.label.clone(),
            source,
        }
    }
}

impl Forecaster for NsvmForecaster {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn predict(&mut self, x: &[Vec<f64>], end: usize) -> Result<PredictiveMixture, ForecastError> {
        Ok(self.predict_many(x, &[end])?.remove(0))
    }

    fn predict_many(&mut self, x: &[Vec<f64>], ends: &[usize]) -> Result<Vec<PredictiveMixture>, ForecastError> {
        check_finite(&self.model)?;
        if let Some(&bad) = ends.iter().find(|&&e| e == 0 || e > x.len()) {
            return Err(ForecastError::TooShort { len: bad, min: 1 });
        }
        let per_graph = (MAX_PREDICT_ROWS / self.paths.max(1)).max(1);
        let mut out: Vec<Option<PredictiveMixture>> = vec![None; ends.len()];
        // windows sharing a length can share a graph
        let mut order: Vec<usize> = (0..ends.len()).collect();
        order.sort_by_key(|&i| (ends[i].min(self.context), i));
        for group in order.chunk_by(|&a, &b| ends[a].min(self.context) == ends[b].min(self.context)) {
            for chunk in group.chunks(per_graph) {
                let windows: Vec<&[Vec<f64>]> = chunk
                    .iter()
                    .map(|&i| &x[ends[i].saturating_sub(self.context)..ends[i]])
                    .collect();
                let comps = self
                    .model
                    .predict_next(&windows, self.paths, &mut self.rng)
                    .map_err(|e| self.wrap(e))?;
                for (&i, c) in chunk.iter().zip(&comps) {
                    out[i] = Some(PredictiveMixture::from_paths(c)?);
                }
            }
        }
        Ok(out.into_iter().map(|m| m.expect("every end predicted")).collect())
    }

    fn retrain(&mut self, x: &[Vec<f64>]) -> Result<(), ForecastError> {
        let (model, log) = train_from(
            self.model.clone(),
            x,
            self.retrain_epochs,
            self.epochs_done,
            &mut self.rng,
        )
        .map_err(|e| self.wrap(e))?;
        self.model = model;
        self.log.rows.extend(log.rows);
        self.epochs_done += self.retrain_epochs;
        Ok(())
    }

    fn training_log(&self) -> Option<TrainingLog> {
        Some(self.log.clone())
    }
}

/// How the recorded predictive variance is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum VarianceEstimate {
    /// Closed-form mixture variance.
    Exact,
    /// Sample variance of draws from the mixture.
    Sampled { draws: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RollingOptions {
    pub retrain_interval: usize,
    pub retrain: bool,
    pub variance: VarianceEstimate,
}

impl Default for RollingOptions {
    fn default() -> Self {
        Self {
            retrain_interval: 20,
            retrain: true,
            variance: VarianceEstimate::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    /// Index of the predicted observation in the panel.
    pub step: usize,
    pub variance: Vec<f64>,
    pub realized: Vec<f64>,
    /// Joint negative log predictive density of `realized`.
    pub nll: f64,
}

impl ForecastRecord {
    pub fn nll_per_dim(&self) -> f64 {
        self.nll / self.realized.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RollingOutput {
    pub records: Vec<ForecastRecord>,
    /// Test steps (1-based, counted from `split`) after which the model was
    /// retrained.
    pub retrain_events: Vec<usize>,
}

impl RollingOutput {
    /// Mean per-dimension, per-step NLL.
    pub fn mean_nll(&self) -> f64 {
        self.records.iter().map(ForecastRecord::nll_per_dim).sum::<f64>() / self.records.len() as f64
    }
}

/// Predicts `panel[split..]` one step at a time. After test step `i`
/// (1-based) has been realized, the model is retrained on `panel[..split+i]`
/// whenever `retrain` is set and `i` is a multiple of `retrain_interval`.
pub fn rolling_forecast(
    model: &mut dyn Forecaster,
    panel: &[Vec<f64>],
    split: usize,
    opts: RollingOptions,
) -> Result<RollingOutput, ForecastError> {
    if opts.retrain_interval == 0 {
        return Err(ForecastError::Options("retrain_interval must be at least 1".into()));
    }
    if split == 0 || split >= panel.len() {
        return Err(ForecastError::TooShort {
            len: panel.len(),
            min: split.max(1) + 1,
        });
    }
    let dim = panel[0].len();
    if let Some(r) = panel.iter().find(|r| r.len() != dim) {
        return Err(ForecastError::Dimension(format!("row of length {} in a panel of width {dim}", r.len())));
    }
    let n = panel.len() - split;
    let mut sampler = match opts.variance {
        VarianceEstimate::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        VarianceEstimate::Exact => None,
    };
    let mut out = RollingOutput {
        records: Vec::with_capacity(n),
        retrain_events: Vec::new(),
    };
    let mut i = 0;
    while i < n {
        let block = if opts.retrain {
            opts.retrain_interval - i % opts.retrain_interval
        } else {
            n
        }
        .min(n - i);
        let ends: Vec<usize> = (split + i..split + i + block).collect();
        let last = *ends.last().expect("block ≥ 1");
        let mixtures = model.predict_many(&panel[..last], &ends)?;
        for (&end, m) in ends.iter().zip(&mixtures) {
            let realized = panel[end].clone();
            let variance = match (&opts.variance, sampler.as_mut()) {
                (VarianceEstimate::Sampled { draws, .. }, Some(rng)) => sampled_moments(m, *draws, rng)?.1,
                _ => mixture_moments(m).1,
            };
            let nll = mixture_nll(m, &realized)?;
            out.records.push(ForecastRecord {
                step: end,
                variance,
                realized,
                nll,
            });
        }
        i += block;
        if opts.retrain && i % opts.retrain_interval == 0 {
            model.retrain(&panel[..split + i])?;
            out.retrain_events.push(i);
        }
    }
    Ok(out)
}

fn output_err(path: &Path, e: impl std::fmt::Display) -> ForecastError {
    ForecastError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// `step,var_0..,x_0..,nll` per record.
pub fn write_records_csv(records: &[ForecastRecord], path: &Path) -> Result<(), ForecastError> {
    let dim = records.first().map_or(0, |r| r.realized.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| output_err(path, e))?;
    let mut header = vec!["step".to_string()];
    header.extend((0..dim).map(|i| format!("var_{i}")));
    header.extend((0..dim).map(|i| format!("x_{i}")));
    header.push("nll".into());
    w.write_record(&header).map_err(|e| output_err(path, e))?;
    for r in records {
        let mut row = vec![r.step.to_string()];
        row.extend(r.variance.iter().map(f64::to_string));
        row.extend(r.realized.iter().map(f64::to_string));
        row.push(r.nll.to_string());
        w.write_record(&row).map_err(|e| output_err(path, e))?;
    }
    w.flush().map_err(|e| output_err(path, e))
}

/// `time,var_0..,abs_0..` per record, for volatility plots.
pub fn write_plot_data(records: &[ForecastRecord], path: &Path) -> Result<(), ForecastError> {
    let dim = records.first().map_or(0, |r| r.realized.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| output_err(path, e))?;
    let mut header = vec!["time".to_string()];
    header.extend((0..dim).map(|i| format!("var_{i}")));
    header.extend((0..dim).map(|i| format!("abs_{i}")));
    w.write_record(&header).map_err(|e| output_err(path, e))?;
    for r in records {
        let mut row = vec![r.step.to_string()];
        row.extend(r.variance.iter().map(f64::to_string));
        row.extend(r.realized.iter().map(|v| v.abs().to_string()));
        w.write_record(&row).map_err(|e| output_err(path, e))?;
    }
    w.flush().map_err(|e| output_err(path, e))
}
