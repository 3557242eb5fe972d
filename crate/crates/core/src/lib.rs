//! Neural stochastic volatility modelling.
//!
//! A small reverse-mode tensor engine ([`tensor`]) carries the recurrent
//! building blocks ([`blocks`]) and low-rank Gaussians ([`covariance`]) that
//! make up the variational model in [`nsvm`]. [`garch`] provides the
//! GARCH-family baselines, [`forecast`] rolls any model forward one step at
//! a time, [`data`] turns price files into normalised return panels, and
//! [`eval`] ties them together into NLL comparison reports.

pub mod tensor;
pub mod blocks;
pub mod covariance;
pub mod optim;
pub mod garch;
pub mod nsvm;
pub mod forecast;
pub mod data;
pub mod eval;

pub use covariance::LowRankGaussian;
pub use data::{PricePanel, TimeSeriesPanel};
pub use eval::{ExperimentConfig, NllReport};
pub use forecast::{ForecastRecord, Forecaster, PredictiveMixture};
pub use garch::{GarchFit, GarchParams, GarchSpec};
pub use nsvm::{Nsvm, NsvmConfig};
pub use tensor::{Graph, Tensor, TensorMap};
