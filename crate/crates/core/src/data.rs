//! Price-panel ingestion and preprocessing.
//!
//! Long-format CSV (`date,ticker,close`) is pivoted into a dates × tickers
//! [`PricePanel`], sparse dates are dropped, gaps are imputed, and the panel
//! is turned into normalised log-returns with a train/test split.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: duplicate row for ({date}, {ticker})")]
    Duplicate { line: u64, date: String, ticker: String },
    #[error("line {line}: non-positive price {price}")]
    NonPositivePrice { line: u64, price: f64 },
    #[error("non-positive price {price} for {ticker} at row {row}")]
    NonPositiveCell { ticker: String, row: usize, price: f64 },
    #[error("missing price for {ticker} at row {row}")]
    MissingCell { ticker: String, row: usize },
    #[error("ticker {0} has no observed prices")]
    NoObservations(String),
    #[error("dimension {dim} has zero variance on the training window")]
    ZeroVariance { dim: usize },
    #[error("split index {split} outside (0, {len})")]
    Split { split: usize, len: usize },
    #[error("series lengths differ: {0}")]
    Length(String),
    #[error("selection: {0}")]
    Selection(String),
    #[error("empty panel")]
    Empty,
    #[error("metadata: {0}")]
    Metadata(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Column names of a long-format price file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceSchema {
    pub date_col: String,
    pub ticker_col: String,
    pub price_col: String,
}

impl Default for PriceSchema {
    fn default() -> Self {
        Self {
            date_col: "date".into(),
            ticker_col: "ticker".into(),
            price_col: "close".into(),
        }
    }
}

/// Dates × tickers closing prices; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    pub tickers: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub prices: Vec<Vec<Option<f64>>>,
}

impl PricePanel {
    pub fn missing_cells(&self) -> usize {
        self.prices.iter().flatten().filter(|p| p.is_none()).count()
    }

    pub fn column(&self, j: usize) -> Vec<Option<f64>> {
        self.prices.iter().map(|r| r[j]).collect()
    }
}

/// A row that could not be parsed and was skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedRow {
    pub line: u64,
    pub reason: String,
}

/// Reads a long-format CSV and pivots it. Tickers are ordered by first
/// appearance, dates ascending. Unparseable rows are skipped and reported.
pub fn load_csv_panel(path: &Path, schema: &PriceSchema) -> Result<(PricePanel, Vec<SkippedRow>), DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let headers = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let (di, ti, pi) = (col(&schema.date_col)?, col(&schema.ticker_col)?, col(&schema.price_col)?);

    let mut tickers: Vec<String> = Vec::new();
    let mut ticker_idx: HashMap<String, usize> = HashMap::new();
    let mut cells: BTreeMap<NaiveDate, HashMap<usize, f64>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let date = match NaiveDate::parse_from_str(field(di), "%Y-%m-%d") {
            Ok(d) => d,
            Err(e) => {
                skipped.push(SkippedRow {
                    line,
                    reason: format!("bad date `{}`: {e}", field(di)),
                });
                continue;
            }
        };
        let price: f64 = match field(pi).parse() {
            Ok(p) => p,
            Err(_) => {
                skipped.push(SkippedRow {
                    line,
                    reason: format!("bad price `{}`", field(pi)),
                });
                continue;
            }
        };
        let ticker = field(ti);
        if ticker.is_empty() {
            skipped.push(SkippedRow {
                line,
                reason: "empty ticker".into(),
            });
            continue;
        }
        if !(price > 0.0) || !price.is_finite() {
            return Err(DataError::NonPositivePrice { line, price });
        }
        let j = *ticker_idx.entry(ticker.to_string()).or_insert_with(|| {
            tickers.push(ticker.to_string());
            tickers.len() - 1
        });
        if cells.entry(date).or_default().insert(j, price).is_some() {
            return Err(DataError::Duplicate {
                line,
                date: date.to_string(),
                ticker: ticker.to_string(),
            });
        }
    }
    let dates: Vec<NaiveDate> = cells.keys().copied().collect();
    let prices = cells
        .values()
        .map(|row| (0..tickers.len()).map(|j| row.get(&j).copied()).collect())
        .collect();
    Ok((PricePanel { tickers, dates, prices }, skipped))
}

/// Removes dates on which more than half the tickers are missing.
pub fn drop_sparse_dates(panel: &PricePanel) -> (PricePanel, Vec<NaiveDate>) {
    let n = panel.tickers.len();
    let mut kept = PricePanel {
        tickers: panel.tickers.clone(),
        dates: Vec::new(),
        prices: Vec::new(),
    };
    let mut dropped = Vec::new();
    for (d, row) in panel.dates.iter().zip(&panel.prices) {
        let missing = row.iter().filter(|p| p.is_none()).count();
        if 2 * missing > n {
            dropped.push(*d);
        } else {
            kept.dates.push(*d);
            kept.prices.push(row.clone());
        }
    }
    (kept, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputeMethod {
    /// Draw around a linear-trend fit of the trailing window.
    Regression,
    /// Fewer than three earlier prices: repeat the last one.
    CarryForward,
    /// Leading gap: copy the first observed price.
    BackFill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedCell {
    pub ticker: String,
    pub date: NaiveDate,
    pub value: f64,
    pub method: ImputeMethod,
}

/// Least-squares line through `(i, y_i)`; returns the prediction at
/// `i = y.len()` and the residual variance with `n − 2` degrees of freedom.
fn trend_forecast(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let tbar = (n - 1.0) / 2.0;
    let ybar = y.iter().sum::<f64>() / n;
    let (mut sty, mut stt) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dt = i as f64 - tbar;
        sty += dt * (v - ybar);
        stt += dt * dt;
    }
    let slope = sty / stt;
    let icept = ybar - slope * tbar;
    let ssr: f64 = y
        .iter()
        .enumerate()
        .map(|(i, v)| (v - icept - slope * i as f64).powi(2))
        .sum();
    (icept + slope * n, ssr / (n - 2.0))
}

/// Fills every missing cell, ticker by ticker in date order.
///
/// A cell with at least three earlier prices since the first observation
/// (observed or already imputed) gets `ŷ + σ̂ε`, where `ŷ` and `σ̂²` come
/// from a linear trend fitted to the last `window` of them. A non-positive draw is replaced by `ŷ`, or the
/// last price if `ŷ` itself is non-positive.
pub fn impute(
    panel: &PricePanel,
    window: usize,
    rng: &mut impl Rng,
) -> Result<(PricePanel, Vec<ImputedCell>), DataError> {
    let mut out = panel.clone();
    let mut log = Vec::new();
    let window = window.max(3);
    for (j, ticker) in panel.tickers.iter().enumerate() {
        let col = panel.column(j);
        let Some(first) = col.iter().position(Option::is_some) else {
            return Err(DataError::NoObservations(ticker.clone()));
        };
        let mut filled: Vec<f64> = Vec::with_capacity(col.len());
        for (t, cell) in col.iter().enumerate() {
            let (value, method) = match *cell {
                Some(v) => (v, None),
                None if t < first => (col[first].expect("observed"), Some(ImputeMethod::BackFill)),
                None if filled.len() - first < 3 => (*filled.last().expect("t > first"), Some(ImputeMethod::CarryForward)),
                None => {
                    let tail = &filled[filled.len().saturating_sub(window).max(first)..];
                    let (yhat, var) = trend_forecast(tail);
                    let eps: f64 = StandardNormal.sample(rng);
                    let draw = yhat + var.max(0.0).sqrt() * eps;
                    let v = if draw > 0.0 {
                        draw
                    } else if yhat > 0.0 {
                        yhat
                    } else {
                        *tail.last().expect("nonempty")
                    };
                    (v, Some(ImputeMethod::Regression))
                }
            };
            if let Some(method) = method {
                out.prices[t][j] = Some(value);
                log.push(ImputedCell {
                    ticker: ticker.clone(),
                    date: panel.dates[t],
                    value,
                    method,
                });
            }
            filled.push(value);
        }
    }
    Ok((out, log))
}

/// `ln(s_t / s_{t−1})` per ticker; `T − 1` rows.
pub fn log_returns(panel: &PricePanel) -> Result<Vec<Vec<f64>>, DataError> {
    for (t, row) in panel.prices.iter().enumerate() {
        for (j, p) in row.iter().enumerate() {
            match p {
                None => {
                    return Err(DataError::MissingCell {
                        ticker: panel.tickers[j].clone(),
                        row: t,
                    })
                }
                Some(v) if !(*v > 0.0) => {
                    return Err(DataError::NonPositiveCell {
                        ticker: panel.tickers[j].clone(),
                        row: t,
                        price: *v,
                    })
                }
                _ => {}
            }
        }
    }
    Ok(panel
        .prices
        .windows(2)
        .map(|w| {
            w[1].iter()
                .zip(&w[0])
                .map(|(b, a)| (b.expect("checked") / a.expect("checked")).ln())
                .collect()
        })
        .collect())
}

/// Standardised returns with the training-window statistics used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesPanel {
    pub values: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub split_index: usize,
}

impl TimeSeriesPanel {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn train(&self) -> &[Vec<f64>] {
        &self.values[..self.split_index]
    }

    pub fn test(&self) -> &[Vec<f64>] {
        &self.values[self.split_index..]
    }

    /// Maps standardised values back to raw returns.
    pub fn denormalize(&self) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .map(|r| r.iter().enumerate().map(|(i, v)| v * self.std[i] + self.mean[i]).collect())
            .collect()
    }
}

/// Z-scores each column with the mean and population standard deviation
/// of rows `[0, split)`.
pub fn normalize(returns: &[Vec<f64>], split: usize) -> Result<TimeSeriesPanel, DataError> {
    if split == 0 || split >= returns.len() {
        return Err(DataError::Split {
            split,
            len: returns.len(),
        });
    }
    let dim = returns[0].len();
    if returns.iter().any(|r| r.len() != dim) {
        return Err(DataError::Length("ragged return matrix".into()));
    }
    let n = split as f64;
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for i in 0..dim {
        mean[i] = returns[..split].iter().map(|r| r[i]).sum::<f64>() / n;
        let var = returns[..split].iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / n;
        std[i] = var.sqrt();
        if !(std[i] > 1e-12) {
            return Err(DataError::ZeroVariance { dim: i });
        }
    }
    let values = returns
        .iter()
        .map(|r| r.iter().enumerate().map(|(i, v)| (v - mean[i]) / std[i]).collect())
        .collect();
    Ok(TimeSeriesPanel {
        values,
        mean,
        std,
        split_index: split,
    })
}

/// Column-stacks `series[selection[k]]` into a `T × d` row matrix.
pub fn assemble_panel(series: &[Vec<f64>], d: usize, selection: &[usize]) -> Result<Vec<Vec<f64>>, DataError> {
    if selection.len() != d {
        return Err(DataError::Selection(format!("{} indices for d = {d}", selection.len())));
    }
    if let Some(&bad) = selection.iter().find(|&&i| i >= series.len()) {
        return Err(DataError::Selection(format!("index {bad} out of {} series", series.len())));
    }
    let Some(&first) = selection.first() else {
        return Err(DataError::Empty);
    };
    let len = series[first].len();
    if let Some(&bad) = selection.iter().find(|&&i| series[i].len() != len) {
        return Err(DataError::Length(format!(
            "series {bad} has {} values, series {first} has {len}",
            series[bad].len()
        )));
    }
    Ok((0..len).map(|t| selection.iter().map(|&i| series[i][t]).collect()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareOptions {
    pub schema: PriceSchema,
    pub impute_window: usize,
    /// Rows of the return matrix used for training; the rest is test.
    pub train_len: usize,
    /// Ticker columns to keep, in order; all when empty.
    pub selection: Vec<usize>,
    pub seed: u64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            schema: PriceSchema::default(),
            impute_window: 20,
            train_len: 2000,
            selection: Vec::new(),
            seed: 0,
        }
    }
}

/// Sidecar describing how a processed panel was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelMetadata {
    pub tickers: Vec<String>,
    pub split_index: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub dropped_dates: Vec<NaiveDate>,
    pub skipped_lines: Vec<u64>,
    pub imputed: Vec<ImputedCell>,
}

impl PanelMetadata {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metadata serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        toml::from_str(text).map_err(|e| DataError::Metadata(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPanel {
    /// Date of each return row (the later of the two prices).
    pub dates: Vec<NaiveDate>,
    pub panel: TimeSeriesPanel,
    pub metadata: PanelMetadata,
}

/// Load, drop sparse dates, impute, take log-returns, select columns and
/// normalise on the first `train_len` rows.
pub fn prepare(path: &Path, opts: &PrepareOptions, rng: &mut impl Rng) -> Result<PreparedPanel, DataError> {
    let (raw, skipped) = load_csv_panel(path, &opts.schema)?;
    if raw.dates.len() < 3 {
        return Err(DataError::Empty);
    }
    let (aligned, dropped) = drop_sparse_dates(&raw);
    let (filled, imputed) = impute(&aligned, opts.impute_window, rng)?;
    let returns = log_returns(&filled)?;
    let selection: Vec<usize> = if opts.selection.is_empty() {
        (0..filled.tickers.len()).collect()
    } else {
        opts.selection.clone()
    };
    let columns: Vec<Vec<f64>> = (0..filled.tickers.len())
        .map(|j| returns.iter().map(|r| r[j]).collect())
        .collect();
    let rows = assemble_panel(&columns, selection.len(), &selection)?;
    let panel = normalize(&rows, opts.train_len)?;
    let metadata = PanelMetadata {
        tickers: selection.iter().map(|&j| filled.tickers[j].clone()).collect(),
        split_index: panel.split_index,
        mean: panel.mean.clone(),
        std: panel.std.clone(),
        dropped_dates: dropped,
        skipped_lines: skipped.iter().map(|s| s.line).collect(),
        imputed,
    };
    Ok(PreparedPanel {
        dates: filled.dates[1..].to_vec(),
        panel,
        metadata,
    })
}

impl PreparedPanel {
    /// Writes `<stem>.csv` (`date,<tickers…>`) and `<stem>.meta.toml`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_err(&csv_path, e))?;
        let mut header = vec!["date".to_string()];
        header.extend(self.metadata.tickers.iter().cloned());
        w.write_record(&header).map_err(|e| io_err(&csv_path, e))?;
        for (d, row) in self.dates.iter().zip(&self.panel.values) {
            let mut rec = vec![d.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec).map_err(|e| io_err(&csv_path, e))?;
        }
        w.flush().map_err(|e| io_err(&csv_path, e))?;
        let meta_path = dir.join(format!("{stem}.meta.toml"));
        std::fs::write(&meta_path, self.metadata.to_toml()).map_err(|e| io_err(&meta_path, e))
    }

    /// Reads back what [`PreparedPanel::write`] produced.
    pub fn read(dir: &Path, stem: &str) -> Result<Self, DataError> {
        let meta_path = dir.join(format!("{stem}.meta.toml"));
        let text = std::fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
        let metadata = PanelMetadata::from_toml(&text)?;
        let (dates, values) = read_matrix_csv(&dir.join(format!("{stem}.csv")))?;
        let dates = dates
            .iter()
            .map(|d| NaiveDate::parse_from_str(d, "%Y-%m-%d").map_err(|e| DataError::Metadata(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            dates,
            panel: TimeSeriesPanel {
                values,
                mean: metadata.mean.clone(),
                std: metadata.std.clone(),
                split_index: metadata.split_index,
            },
            metadata,
        })
    }
}

/// Reads a CSV whose first column is a label and the rest are numbers.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), DataError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let (mut labels, mut rows) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        labels.push(rec.get(0).unwrap_or("").to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| io_err(path, format!("line {line}: {e}")))?;
        rows.push(row);
    }
    Ok((labels, rows))
}
