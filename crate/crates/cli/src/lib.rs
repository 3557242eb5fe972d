//! `volnet` command dispatch.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use volnet::data::{PrepareOptions, PreparedPanel};
use volnet::eval::{self, ExperimentConfig, Generator, ModelSpec, ReportFormat};
use volnet::forecast::{self, RollingOptions};
use volnet::garch::{GarchParams, GarchSpec};
use volnet::nsvm::NsvmConfig;

pub mod model_file;

use model_file::{BaselineFile, SavedModel};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    volnet::data::DataError,
    volnet::eval::EvalError,
    volnet::forecast::ForecastError,
    volnet::garch::GarchError,
    volnet::nsvm::NsvmError,
    csv::Error
);

#[derive(Debug, Parser)]
#[command(name = "volnet", version, about = "Neural stochastic volatility models and GARCH baselines")]
pub struct Cli {
    /// TOML configuration for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Random seed; overrides any seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a long-format price CSV into a normalised log-return panel.
    Prepare(PrepareArgs),
    /// Fit one model on the training part of a prepared panel.
    Fit(FitArgs),
    /// Roll a fitted model over the test part of a prepared panel.
    Forecast(ForecastArgs),
    /// Run an experiment configuration and write the NLL report.
    Bench,
    /// Simulate a GARCH or canonical stochastic-volatility series to CSV.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Long-format CSV with date, ticker and close columns.
    #[arg(long)]
    pub input: PathBuf,
    /// Return rows used for training.
    #[arg(long)]
    pub train_len: Option<usize>,
    #[arg(long)]
    pub impute_window: Option<usize>,
    /// Ticker columns to keep, e.g. `0,3,5`.
    #[arg(long, value_delimiter = ',')]
    pub select: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub panel: PathBuf,
    /// `constant`, a GARCH-family spec such as `garch(1,1)`, `nsvm-diag` or `nsvm-corr`.
    #[arg(long)]
    pub model: String,
    /// Training epochs for NSVM models.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// File written by `fit`.
    #[arg(long)]
    pub model_file: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub retrain_interval: usize,
    #[arg(long)]
    pub no_retrain: bool,
    /// Sample paths for NSVM predictive mixtures.
    #[arg(long)]
    pub paths: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// `garch11`, `sv`, or a GARCH-family spec whose parameters come from `--config`.
    #[arg(long)]
    pub model: String,
    /// Number of observations.
    #[arg(long = "T", default_value_t = 1000)]
    pub t_len: usize,
}

const PANEL_STEM: &str = "panel";

fn out_dir(cli_out: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = cli_out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn cli_dispatch<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(sink, "{text}");
            return code;
        }
    };
    match run(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Prepare(a) => prepare(cli, a, stdout),
        Command::Fit(a) => fit(cli, a, stdout),
        Command::Forecast(a) => forecast_cmd(cli, a, stdout),
        Command::Bench => bench(cli, stdout),
        Command::Synth(a) => synth(cli, a, stdout),
    }
}

fn say(stdout: &mut dyn Write, msg: impl std::fmt::Display) -> Result<(), CliError> {
    writeln!(stdout, "{msg}").map_err(|e| CliError::Runtime(e.to_string()))
}

fn prepare(cli: &Cli, a: &PrepareArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut opts: PrepareOptions = read_config(&cli.config)?;
    if let Some(n) = a.train_len {
        opts.train_len = n;
    }
    if let Some(w) = a.impute_window {
        opts.impute_window = w;
    }
    if let Some(sel) = &a.select {
        opts.selection = sel.clone();
    }
    if let Some(s) = cli.seed {
        opts.seed = s;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let prepared = volnet::data::prepare(&a.input, &opts, &mut rng)?;
    let dir = out_dir(&cli.out)?;
    prepared.write(&dir, PANEL_STEM)?;
    say(
        stdout,
        format!(
            "{} returns x {} series (train {}), {} cells imputed, {} dates dropped -> {}",
            prepared.panel.len(),
            prepared.panel.dim(),
            prepared.panel.split_index,
            prepared.metadata.imputed.len(),
            prepared.metadata.dropped_dates.len(),
            dir.join(format!("{PANEL_STEM}.csv")).display()
        ),
    )
}

fn model_spec(name: &str) -> Result<ModelSpec, CliError> {
    Ok(match name {
        "constant" => ModelSpec::Constant,
        "nsvm-diag" | "nsvm" => ModelSpec::Nsvm {
            name: name.into(),
            covariance_rank: 0,
        },
        "nsvm-corr" => ModelSpec::Nsvm {
            name: name.into(),
            covariance_rank: 1,
        },
        other => {
            other
                .parse::<GarchSpec>()
                .map_err(|e| CliError::Usage(format!("unknown model `{other}`: {e}")))?;
            ModelSpec::Garch { spec: other.into() }
        }
    })
}

fn fit(cli: &Cli, a: &FitArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let spec = model_spec(&a.model)?;
    let prepared = PreparedPanel::read(&a.panel, PANEL_STEM)?;
    let train = prepared.panel.train();
    let dir = out_dir(&cli.out)?;
    let seed = cli.seed.unwrap_or(0);
    match &spec {
        ModelSpec::Nsvm { name, covariance_rank } => {
            let mut config: NsvmConfig = read_config(&cli.config)?;
            config.obs_dim = prepared.panel.dim();
            config.covariance_rank = *covariance_rank;
            if let Some(e) = a.epochs {
                config.max_epochs = e;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (model, log) = volnet::nsvm::train(&config, train, &mut rng)?;
            let path = dir.join("model.ckpt");
            model.save(&path)?;
            let log_path = dir.join("training_log.csv");
            if log_path.exists() {
                std::fs::remove_file(&log_path).map_err(|e| CliError::io(&log_path, e))?;
            }
            log.append_csv(&log_path)?;
            say(
                stdout,
                format!("{name}: final loss {:.5} -> {}", log.tail_mean(1), path.display()),
            )
        }
        ModelSpec::Constant => {
            let f = forecast::ConstantForecaster::fit(train)?;
            let path = dir.join("model.toml");
            SavedModel::Baseline(BaselineFile::Constant {
                mean: f.mean.clone(),
                var: f.var.clone(),
            })
            .save(&path)?;
            say(stdout, format!("constant: var {:?} -> {}", f.var, path.display()))
        }
        ModelSpec::Garch { spec } => {
            let parsed: GarchSpec = spec.parse()?;
            let f = forecast::GarchForecaster::fit(parsed, train)?;
            let path = dir.join("model.toml");
            for (i, fit) in f.fits.iter().enumerate() {
                say(
                    stdout,
                    format!(
                        "{spec} series {i}: nll {:.5} converged {} after {} iterations",
                        fit.nll, fit.converged, fit.iterations
                    ),
                )?;
            }
            SavedModel::Baseline(BaselineFile::Garch {
                spec: spec.clone(),
                fits: f.fits,
            })
            .save(&path)?;
            say(stdout, format!("-> {}", path.display()))
        }
    }
}

fn forecast_cmd(cli: &Cli, a: &ForecastArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    if a.retrain_interval == 0 {
        return Err(CliError::Usage("--retrain-interval must be at least 1".into()));
    }
    let prepared = PreparedPanel::read(&a.panel, PANEL_STEM)?;
    let saved = SavedModel::load(&a.model_file)?;
    let label = a
        .model_file
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    let mut f = match saved {
        SavedModel::Nsvm(mut m) => {
            if let Some(p) = a.paths {
                m.config.sample_paths = p;
            }
            SavedModel::Nsvm(m).into_forecaster(&label, cli.seed.unwrap_or(0))?
        }
        other => other.into_forecaster(&label, cli.seed.unwrap_or(0))?,
    };
    let opts = RollingOptions {
        retrain_interval: a.retrain_interval,
        retrain: !a.no_retrain,
        ..RollingOptions::default()
    };
    let panel = &prepared.panel;
    let out = forecast::rolling_forecast(f.as_mut(), &panel.values, panel.split_index, opts)?;
    let dir = out_dir(&cli.out)?;
    forecast::write_records_csv(&out.records, &dir.join("forecasts.csv"))?;
    forecast::write_plot_data(&out.records, &dir.join("plot.csv"))?;
    say(
        stdout,
        format!(
            "{} test steps, mean NLL per dimension {:.5}, {} retraining rounds -> {}",
            out.records.len(),
            out.mean_nll(),
            out.retrain_events.len(),
            dir.join("forecasts.csv").display()
        ),
    )
}

fn bench(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let Some(path) = &cli.config else {
        return Err(CliError::Usage("bench needs --config <file>".into()));
    };
    let mut config = ExperimentConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let dir = cli
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("bench_out"));
    let report = eval::run_experiment(&config, Some(&dir))?;
    eval::emit_report(&report, &dir, &[ReportFormat::Csv, ReportFormat::Text])?;
    write!(stdout, "{}", report.to_text_table()).map_err(|e| CliError::Runtime(e.to_string()))?;
    say(stdout, format!("-> {}", dir.join("report.csv").display()))
}

fn synth_generator(cli: &Cli, model: &str) -> Result<Generator, CliError> {
    Ok(match model {
        "garch11" => Generator::Garch {
            spec: "garch(1,1)".into(),
            params: GarchParams {
                alpha0: 0.05,
                alpha: vec![0.1],
                beta: vec![0.85],
                ..GarchParams::default()
            },
        },
        "sv" | "canonical-sv" => match &cli.config {
            Some(_) => read_sv(cli)?,
            None => Generator::CanonicalSv {
                eta: 0.0,
                phi: 0.95,
                sigma_z: 0.2,
            },
        },
        other => {
            other
                .parse::<GarchSpec>()
                .map_err(|e| CliError::Usage(format!("unknown model `{other}`: {e}")))?;
            let Some(path) = &cli.config else {
                return Err(CliError::Usage(format!("`{other}` needs --config with its parameters")));
            };
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let params: GarchParams =
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            Generator::Garch {
                spec: other.into(),
                params,
            }
        }
    })
}

fn read_sv(cli: &Cli) -> Result<Generator, CliError> {
    #[derive(serde::Deserialize)]
    struct Sv {
        #[serde(default)]
        eta: f64,
        phi: f64,
        sigma_z: f64,
    }
    let path = cli.config.as_ref().expect("checked by caller");
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let sv: Sv = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(Generator::CanonicalSv {
        eta: sv.eta,
        phi: sv.phi,
        sigma_z: sv.sigma_z,
    })
}

fn synth(cli: &Cli, a: &SynthArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    if a.t_len == 0 {
        return Err(CliError::Usage("--T must be positive".into()));
    }
    let generator = synth_generator(cli, &a.model)?;
    let seed = cli.seed.unwrap_or(0);
    let (x, var) = match &generator {
        Generator::Garch { spec, params } => {
            let sim = volnet::garch::simulate_garch(&spec.parse()?, params, a.t_len, seed)?;
            (sim.x, sim.sigma_sq)
        }
        Generator::CanonicalSv { eta, phi, sigma_z } => {
            let p = volnet::garch::SvCanonicalParams {
                eta: *eta,
                phi: *phi,
                sigma_z: *sigma_z,
            };
            let (x, h) = volnet::garch::simulate_canonical_sv(&p, a.t_len, seed)?;
            (x, h.iter().map(|v| v.exp()).collect())
        }
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "x", "variance"])?;
    for (t, (xi, vi)) in x.iter().zip(&var).enumerate() {
        w.write_record([t.to_string(), xi.to_string(), vi.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    match &cli.out {
        Some(_) => {
            let dir = out_dir(&cli.out)?;
            let path = dir.join(format!("synth_{}.csv", a.model.replace(['(', ')', ','], "_")));
            std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
            say(stdout, format!("{} observations -> {}", a.t_len, path.display()))
        }
        None => stdout.write_all(&bytes).map_err(|e| CliError::Runtime(e.to_string())),
    }
}

#[cfg(test)]
mod tests;
