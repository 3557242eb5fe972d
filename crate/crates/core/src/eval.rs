//! Experiment harness: a roster of models scored by rolling one-step NLL on
//! a set of series, summarised as a series × model table.
//!
//! Configuration is TOML:
//!
//! ```toml
//! seed = 7
//! retrain_interval = 20
//!
//! [data]
//! kind = "synthetic"
//! series = 2
//! length = 600
//! train_len = 500
//! [data.generator]
//! model = "canonical-sv"
//! phi = 0.95
//! sigma_z = 0.2
//!
//! [nsvm]            # shared NSVM settings; obs_dim comes from the data
//! hidden_dim = 6
//!
//! [[models]]
//! kind = "constant"
//! [[models]]
//! kind = "garch"
//! spec = "garch(1,1)"
//! [[models]]
//! kind = "nsvm"
//! name = "nsvm-diag"
//! ```

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, PrepareOptions, PriceSchema, TimeSeriesPanel};
use crate::forecast::{
    self, ConstantForecaster, ForecastError, Forecaster, GarchForecaster, NsvmForecaster, RollingOptions,
    RollingOutput, VarianceEstimate,
};
use crate::garch::{self, GarchError, GarchParams, GarchSpec, SvCanonicalParams};
use crate::nsvm::NsvmConfig;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("series {series}, model {model}: {source}")]
    Cell {
        series: String,
        model: String,
        #[source]
        source: ForecastError,
    },
    #[error("series {series}: {source}")]
    Synthesis {
        series: String,
        #[source]
        source: GarchError,
    },
    #[error("writing {path}: {message}")]
    Output { path: String, message: String },
    #[error("report: {0}")]
    Report(String),
}

fn out_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Synthetic return generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum Generator {
    CanonicalSv {
        #[serde(default)]
        eta: f64,
        phi: f64,
        sigma_z: f64,
    },
    Garch {
        spec: String,
        params: GarchParams,
    },
}

impl Generator {
    /// `len` draws with the given seed.
    pub fn simulate(&self, len: usize, seed: u64) -> Result<Vec<f64>, GarchError> {
        match self {
            Self::CanonicalSv { eta, phi, sigma_z } => {
                let p = SvCanonicalParams {
                    eta: *eta,
                    phi: *phi,
                    sigma_z: *sigma_z,
                };
                Ok(garch::simulate_canonical_sv(&p, len, seed)?.0)
            }
            Self::Garch { spec, params } => {
                let spec: GarchSpec = spec.parse()?;
                Ok(garch::simulate_garch(&spec, params, len, seed)?.x)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Independent simulated series; each report row is one series with
    /// `dim` independently simulated columns.
    Synthetic {
        generator: Generator,
        series: usize,
        #[serde(default = "one")]
        dim: usize,
        length: usize,
        train_len: usize,
    },
    /// A long-format price file. Each group of ticker columns becomes one
    /// report row; by default consecutive groups of `d` tickers.
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: PriceSchema,
        #[serde(default = "twenty")]
        impute_window: usize,
        train_len: usize,
        #[serde(default = "one")]
        d: usize,
        #[serde(default)]
        groups: Vec<Vec<usize>>,
    },
}

fn one() -> usize {
    1
}

fn twenty() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    Constant,
    Garch {
        spec: String,
    },
    Nsvm {
        name: String,
        #[serde(default)]
        covariance_rank: usize,
    },
}

impl ModelSpec {
    pub fn name(&self) -> String {
        match self {
            Self::Constant => "constant".into(),
            Self::Garch { spec } => spec.clone(),
            Self::Nsvm { name, .. } => name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub nsvm: NsvmConfig,
    #[serde(default = "twenty")]
    pub retrain_interval: usize,
    #[serde(default = "yes")]
    pub retrain: bool,
    /// Retrain interval for the non-neural baselines; defaults to
    /// `retrain_interval`. Set to 1 to refit them at every step.
    #[serde(default)]
    pub baseline_retrain_interval: Option<usize>,
    #[serde(default = "exact")]
    pub variance: VarianceEstimate,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

fn exact() -> VarianceEstimate {
    VarianceEstimate::Exact
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        let c: Self = toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text)?;
        // relative data paths resolve against the config file
        if let DataSource::Csv { path: p, .. } = &mut c.data {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.models.is_empty() {
            return Err(EvalError::Config("model roster is empty".into()));
        }
        if self.retrain_interval == 0 || self.baseline_retrain_interval == Some(0) {
            return Err(EvalError::Config("retrain intervals must be at least 1".into()));
        }
        for m in &self.models {
            match m {
                ModelSpec::Garch { spec } => {
                    spec.parse::<GarchSpec>().map_err(|e| EvalError::Config(e.to_string()))?;
                }
                ModelSpec::Nsvm { covariance_rank, .. } if *covariance_rank > 1 => {
                    return Err(EvalError::Config("covariance_rank must be 0 or 1".into()));
                }
                _ => {}
            }
        }
        match &self.data {
            DataSource::Synthetic {
                series,
                dim,
                length,
                train_len,
                ..
            } => {
                if *series == 0 || *dim == 0 {
                    return Err(EvalError::Config("synthetic data needs at least one series and column".into()));
                }
                if *train_len == 0 || train_len >= length {
                    return Err(EvalError::Config(format!("train_len {train_len} must lie in (0, {length})")));
                }
            }
            DataSource::Csv { d, groups, .. } => {
                if *d == 0 || groups.iter().any(|g| g.len() != *d) {
                    return Err(EvalError::Config(format!("every group must hold d = {d} tickers")));
                }
            }
        }
        Ok(())
    }
}

/// One report row's data.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub panel: TimeSeriesPanel,
}

/// Materialises the configured data source.
pub fn load_series(config: &ExperimentConfig) -> Result<Vec<Series>, EvalError> {
    match &config.data {
        DataSource::Synthetic {
            generator,
            series,
            dim,
            length,
            train_len,
        } => (0..*series)
            .map(|k| {
                let name = format!("synthetic-{k}");
                let cols = (0..*dim)
                    .map(|j| generator.simulate(*length, derive_seed(config.seed, &name, j as u64)))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|source| EvalError::Synthesis {
                        series: name.clone(),
                        source,
                    })?;
                let sel: Vec<usize> = (0..*dim).collect();
                let rows = data::assemble_panel(&cols, *dim, &sel)?;
                Ok(Series {
                    panel: data::normalize(&rows, *train_len)?,
                    name,
                })
            })
            .collect(),
        DataSource::Csv {
            path,
            schema,
            impute_window,
            train_len,
            d,
            groups,
        } => {
            let opts = PrepareOptions {
                schema: schema.clone(),
                impute_window: *impute_window,
                train_len: *train_len,
                selection: Vec::new(),
                seed: config.seed,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let all = data::prepare(path, &opts, &mut rng)?;
            let n = all.metadata.tickers.len();
            let groups: Vec<Vec<usize>> = if groups.is_empty() {
                (0..n / d).map(|g| (g * d..(g + 1) * d).collect()).collect()
            } else {
                groups.clone()
            };
            if groups.is_empty() {
                return Err(EvalError::Config(format!("{n} tickers cannot fill a group of {d}")));
            }
            groups
                .iter()
                .map(|g| {
                    let cols: Vec<Vec<f64>> = (0..n).map(|j| all.panel.values.iter().map(|r| r[j]).collect()).collect();
                    let rows = data::assemble_panel(&cols, *d, g)?;
                    let name = g.iter().map(|&j| all.metadata.tickers[j].as_str()).collect::<Vec<_>>().join("+");
                    Ok(Series {
                        name,
                        panel: TimeSeriesPanel {
                            values: rows,
                            mean: g.iter().map(|&j| all.panel.mean[j]).collect(),
                            std: g.iter().map(|&j| all.panel.std[j]).collect(),
                            split_index: all.panel.split_index,
                        },
                    })
                })
                .collect()
        }
    }
}

/// Stable per-cell seed from the experiment seed, a label and an index.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes().chain(index.to_le_bytes()).chain(base.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Builds and fits the forecaster for one roster entry on a training window.
pub fn build_forecaster(
    spec: &ModelSpec,
    nsvm: &NsvmConfig,
    train: &[Vec<f64>],
    seed: u64,
) -> Result<Box<dyn Forecaster + Send>, ForecastError> {
    Ok(match spec {
        ModelSpec::Constant => Box::new(ConstantForecaster::fit(train)?),
        ModelSpec::Garch { spec } => {
            let parsed: GarchSpec = spec.parse().map_err(|source| ForecastError::Garch {
                model: spec.clone(),
                source,
            })?;
            Box::new(GarchForecaster::fit(parsed, train)?)
        }
        ModelSpec::Nsvm { name, covariance_rank } => {
            let config = NsvmConfig {
                obs_dim: train.first().map_or(1, Vec::len),
                covariance_rank: *covariance_rank,
                ..nsvm.clone()
            };
            Box::new(NsvmForecaster::train(name, &config, train, seed)?)
        }
    })
}

/// Result of one (series, model) cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub series: String,
    pub model: String,
    pub output: RollingOutput,
    pub training_log: Option<crate::nsvm::TrainingLog>,
}

/// Trains and rolls one roster entry over one series.
pub fn run_cell(config: &ExperimentConfig, series: &Series, spec: &ModelSpec) -> Result<CellResult, EvalError> {
    let model = spec.name();
    let wrap = |source| EvalError::Cell {
        series: series.name.clone(),
        model: model.clone(),
        source,
    };
    let seed = derive_seed(config.seed, &format!("{}/{}", series.name, model), 0);
    let panel = &series.panel;
    let mut f = build_forecaster(spec, &config.nsvm, panel.train(), seed).map_err(wrap)?;
    let interval = match spec {
        ModelSpec::Nsvm { .. } => config.retrain_interval,
        _ => config.baseline_retrain_interval.unwrap_or(config.retrain_interval),
    };
    let opts = RollingOptions {
        retrain_interval: interval,
        retrain: config.retrain,
        variance: config.variance,
    };
    let output = forecast::rolling_forecast(f.as_mut(), &panel.values, panel.split_index, opts).map_err(wrap)?;
    Ok(CellResult {
        series: series.name.clone(),
        model,
        output,
        training_log: f.training_log(),
    })
}

/// Series × model table of mean per-dimension, per-step test NLL.
#[derive(Debug, Clone, PartialEq)]
pub struct NllReport {
    pub series: Vec<String>,
    pub models: Vec<String>,
    /// `values[series][model]`.
    pub values: Vec<Vec<f64>>,
}

impl NllReport {
    /// Column means over series.
    pub fn averages(&self) -> Vec<f64> {
        let n = self.series.len() as f64;
        (0..self.models.len())
            .map(|j| self.values.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect()
    }

    /// `wins[i][j]`: series on which model `i` scores strictly lower than
    /// model `j`.
    pub fn win_counts(&self) -> Vec<Vec<usize>> {
        let m = self.models.len();
        let mut w = vec![vec![0; m]; m];
        for row in &self.values {
            for i in 0..m {
                for j in 0..m {
                    if row[i] < row[j] {
                        w[i][j] += 1;
                    }
                }
            }
        }
        w
    }

    /// CSV with a header `series,<models…>`, one row per series and a
    /// final `AVG` row. Values use shortest round-trip formatting.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| EvalError::Report(e.to_string());
        let mut header = vec!["series".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for (name, row) in self.series.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec).map_err(err)?;
        }
        let mut avg = vec!["AVG".to_string()];
        avg.extend(self.averages().iter().map(f64::to_string));
        w.write_record(&avg).map_err(err)?;
        let bytes = w.into_inner().map_err(|e| EvalError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EvalError::Report(e.to_string()))
    }

    /// Parses [`NllReport::to_csv`] output, checking the `AVG` row.
    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let bad = |m: String| EvalError::Report(m);
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
        let models: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut series = Vec::new();
        let mut values = Vec::new();
        let mut avg = None;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let row = rec
                .iter()
                .skip(1)
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(e.to_string()))?;
            if row.len() != models.len() {
                return Err(bad(format!("row with {} values for {} models", row.len(), models.len())));
            }
            if &rec[0] == "AVG" {
                avg = Some(row);
            } else {
                series.push(rec[0].to_string());
                values.push(row);
            }
        }
        let report = Self { series, models, values };
        match avg {
            Some(a) if a == report.averages() => Ok(report),
            Some(_) => Err(bad("AVG row disagrees with the series rows".into())),
            None => Err(bad("missing AVG row".into())),
        }
    }

    /// Aligned table with the `AVG` row and a head-to-head win matrix.
    pub fn to_text_table(&self) -> String {
        let name_w = self
            .series
            .iter()
            .map(String::len)
            .chain(["series".len(), "AVG".len()])
            .max()
            .unwrap_or(6);
        let col_w: Vec<usize> = self.models.iter().map(|m| m.len().max(8)).collect();
        let mut out = String::new();
        let line = |label: &str, cells: Vec<String>| {
            let mut s = format!("{label:<name_w$}");
            for (c, w) in cells.iter().zip(&col_w) {
                s.push_str(&format!("  {c:>w$}"));
            }
            s.push('\n');
            s
        };
        out.push_str(&line("series", self.models.clone()));
        for (name, row) in self.series.iter().zip(&self.values) {
            out.push_str(&line(name, row.iter().map(|v| format!("{v:.4}")).collect()));
        }
        out.push_str(&line("AVG", self.averages().iter().map(|v| format!("{v:.4}")).collect()));
        out.push_str(&format!("\nwins (row beats column) over {} series\n", self.series.len()));
        for (i, row) in self.win_counts().iter().enumerate() {
            out.push_str(&line(&self.models[i], row.iter().map(usize::to_string).collect()));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

/// Writes `report.csv` and/or `report.txt` into `dir`.
pub fn emit_report(report: &NllReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
    let mut written = Vec::new();
    for f in formats {
        let (path, body) = match f {
            ReportFormat::Csv => (dir.join("report.csv"), report.to_csv()?),
            ReportFormat::Text => (dir.join("report.txt"), report.to_text_table()),
        };
        std::fs::write(&path, body).map_err(|e| out_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn file_stem(series: &str, model: &str) -> String {
    format!("{series}__{model}")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes per-cell forecast records, plot data and NSVM training logs.
pub fn write_cell_outputs(cell: &CellResult, dir: &Path) -> Result<(), EvalError> {
    let stem = file_stem(&cell.series, &cell.model);
    for sub in ["forecasts", "plots", "logs"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| out_err(&d, e))?;
    }
    let wrap = |source| EvalError::Cell {
        series: cell.series.clone(),
        model: cell.model.clone(),
        source,
    };
    forecast::write_records_csv(&cell.output.records, &dir.join("forecasts").join(format!("{stem}.csv"))).map_err(wrap)?;
    forecast::write_plot_data(&cell.output.records, &dir.join("plots").join(format!("{stem}.csv"))).map_err(wrap)?;
    if let Some(log) = &cell.training_log {
        let path = dir.join("logs").join(format!("{stem}.csv"));
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| out_err(&path, e))?;
        }
        log.append_csv(&path).map_err(|e| out_err(&path, e))?;
    }
    Ok(())
}

/// Runs every (series, model) cell, in parallel, and assembles the report.
/// When `out` is given, per-cell files and the report are written there.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<NllReport, EvalError> {
    config.validate()?;
    let series = load_series(config)?;
    let cells: Vec<(usize, usize)> = (0..series.len())
        .flat_map(|s| (0..config.models.len()).map(move |m| (s, m)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(s, m)| run_cell(config, &series[s], &config.models[m]))
        .collect::<Result<Vec<_>, _>>()?;
    let mut values = vec![vec![0.0; config.models.len()]; series.len()];
    for (&(s, m), r) in cells.iter().zip(&results) {
        values[s][m] = r.output.mean_nll();
    }
    let report = NllReport {
        series: series.iter().map(|s| s.name.clone()).collect(),
        models: config.models.iter().map(ModelSpec::name).collect(),
        values,
    };
    if let Some(dir) = out {
        for r in &results {
            write_cell_outputs(r, dir)?;
        }
        emit_report(&report, dir, &[ReportFormat::Csv, ReportFormat::Text])?;
    }
    Ok(report)
}
