//! On-disk form of fitted models.
//!
//! NSVM models are tensor checkpoints (`.ckpt` text or `.bin` binary);
//! baselines are TOML documents tagged by `kind`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use volnet::forecast::{ConstantForecaster, Forecaster, GarchForecaster, NsvmForecaster};
use volnet::garch::{GarchFit, GarchSpec};
use volnet::nsvm::{Nsvm, TrainingLog};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaselineFile {
    Constant { mean: Vec<f64>, var: Vec<f64> },
    Garch { spec: String, fits: Vec<GarchFit> },
}

pub enum SavedModel {
    Nsvm(Nsvm),
    Baseline(BaselineFile),
}

fn is_checkpoint(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("ckpt" | "bin"))
}

impl SavedModel {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if is_checkpoint(path) {
            return Ok(Self::Nsvm(Nsvm::load(path)?));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file: BaselineFile =
            toml::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(Self::Baseline(file))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        match self {
            Self::Nsvm(m) => Ok(m.save(path)?),
            Self::Baseline(b) => {
                let text = toml::to_string(b).map_err(|e| CliError::Runtime(e.to_string()))?;
                std::fs::write(path, text).map_err(|e| CliError::io(path, e))
            }
        }
    }

    pub fn into_forecaster(self, label: &str, seed: u64) -> Result<Box<dyn Forecaster>, CliError> {
        Ok(match self {
            Self::Nsvm(m) => Box::new(NsvmForecaster::new(label, m, TrainingLog::default(), seed)),
            Self::Baseline(BaselineFile::Constant { mean, var }) => Box::new(ConstantForecaster { mean, var }),
            Self::Baseline(BaselineFile::Garch { spec, fits }) => {
                let spec: GarchSpec = spec.parse().map_err(|e| CliError::Runtime(format!("{e}")))?;
                Box::new(GarchForecaster { spec, fits })
            }
        })
    }
}
