//! Cross-module flows through the public API.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volnet::data::normalize;
use volnet::eval::{run_experiment, ExperimentConfig};
use volnet::forecast::{rolling_forecast, ConstantForecaster, Forecaster, GarchForecaster, NsvmForecaster, RollingOptions};
use volnet::garch::{simulate_garch, GarchParams, GarchSpec};
use volnet::nsvm::{train, NsvmConfig};
use volnet::Nsvm;

fn garch_panel(len: usize, seed: u64) -> Vec<Vec<f64>> {
    let params = GarchParams {
        alpha0: 0.05,
        alpha: vec![0.15],
        beta: vec![0.8],
        ..GarchParams::default()
    };
    let sim = simulate_garch(&GarchSpec::garch(1, 1), &params, len, seed).unwrap();
    sim.x.into_iter().map(|v| vec![v]).collect()
}

#[test]
fn every_model_sees_the_same_realized_test_rows() {
    let raw = garch_panel(700, 4);
    let panel = normalize(&raw, 600).unwrap();
    let config = NsvmConfig {
        obs_dim: 1,
        latent_dim: 2,
        hidden_dim: 4,
        window: 50,
        max_epochs: 3,
        sample_paths: 8,
        ..NsvmConfig::default()
    };
    let mut models: Vec<Box<dyn Forecaster>> = vec![
        Box::new(ConstantForecaster::fit(panel.train()).unwrap()),
        Box::new(GarchForecaster::fit(GarchSpec::garch(1, 1), panel.train()).unwrap()),
        Box::new(NsvmForecaster::train("nsvm", &config, panel.train(), 9).unwrap()),
    ];
    let mut realized = Vec::new();
    for m in models.iter_mut() {
        let out = rolling_forecast(m.as_mut(), &panel.values, panel.split_index, RollingOptions::default()).unwrap();
        assert_eq!(out.records.len(), 100);
        assert_eq!(out.retrain_events, vec![20, 40, 60, 80, 100]);
        assert!(out.mean_nll().is_finite());
        realized.push(out.records.iter().map(|r| r.realized.clone()).collect::<Vec<_>>());
    }
    assert!(realized.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(realized[0], panel.test().to_vec());
}

#[test]
fn garch_beats_constant_on_garch_data() {
    let raw = garch_panel(3000, 11);
    let panel = normalize(&raw, 2500).unwrap();
    let opts = RollingOptions {
        retrain: false,
        ..RollingOptions::default()
    };
    let mut c = ConstantForecaster::fit(panel.train()).unwrap();
    let mut g = GarchForecaster::fit(GarchSpec::garch(1, 1), panel.train()).unwrap();
    let nc = rolling_forecast(&mut c, &panel.values, 2500, opts).unwrap().mean_nll();
    let ng = rolling_forecast(&mut g, &panel.values, 2500, opts).unwrap().mean_nll();
    assert!(ng < nc, "garch {ng} vs constant {nc}");
}

#[test]
fn checkpointed_model_forecasts_identically() {
    let raw = garch_panel(300, 2);
    let config = NsvmConfig {
        obs_dim: 1,
        latent_dim: 2,
        hidden_dim: 3,
        window: 30,
        max_epochs: 2,
        sample_paths: 5,
        covariance_rank: 1,
        ..NsvmConfig::default()
    };
    let (model, log) = train(&config, &raw[..250], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let loaded = Nsvm::load(&path).unwrap();
    assert_eq!(loaded, model);

    let opts = RollingOptions {
        retrain: false,
        ..RollingOptions::default()
    };
    let mut a = NsvmForecaster::new("a", model, log.clone(), 5);
    let mut b = NsvmForecaster::new("b", loaded, log, 5);
    let ra = rolling_forecast(&mut a, &raw, 250, opts).unwrap();
    let rb = rolling_forecast(&mut b, &raw, 250, opts).unwrap();
    assert_eq!(ra.records, rb.records);
}

#[test]
fn experiment_is_reproducible_and_seed_sensitive() {
    let text = r#"
seed = 5
retrain_interval = 25
[data]
kind = "synthetic"
series = 2
length = 300
train_len = 250
[data.generator]
model = "garch"
spec = "garch(1,1)"
params = { alpha0 = 0.05, alpha = [0.1], beta = [0.85] }
[[models]]
kind = "constant"
[[models]]
kind = "garch"
spec = "gjr(1,1,1)"
"#;
    let config = ExperimentConfig::from_toml(text).unwrap();
    let a = run_experiment(&config, None).unwrap();
    let b = run_experiment(&config, None).unwrap();
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    let other = ExperimentConfig { seed: 6, ..config };
    assert_ne!(run_experiment(&other, None).unwrap().to_csv().unwrap(), a.to_csv().unwrap());
}
