use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;

fn dispatch(args: &[&str]) -> (u8, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("volnet").chain(args.iter().copied());
    let code = cli_dispatch(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write_prices(path: &Path, tickers: usize, days: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["date", "ticker", "close"]).unwrap();
    let mut price = vec![100.0_f64; tickers];
    for day in 0..days {
        for (k, p) in price.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p *= (0.01 * z).exp();
            // a few holes to exercise imputation
            if (day * 7 + k * 3) % 97 == 5 {
                continue;
            }
            w.write_record([chrono_free_date(day), format!("T{k}"), format!("{p:.6}")])
                .unwrap();
        }
    }
    w.flush().unwrap();
}

/// ISO date `days` after 2001-01-01, counting 28-day months for simplicity.
fn chrono_free_date(days: usize) -> String {
    let year = 2001 + days / 336;
    let month = 1 + (days % 336) / 28;
    let day = 1 + days % 28;
    format!("{year:04}-{month:02}-{day:02}")
}

#[test]
fn help_exits_zero_with_usage() {
    let (code, out, _) = dispatch(&["--help"]);
    assert_eq!(code, EXIT_OK);
    for sub in ["prepare", "fit", "forecast", "bench", "synth"] {
        assert!(out.contains(sub), "help lacks {sub}:\n{out}");
    }
    assert!(out.contains("Usage"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(dispatch(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(dispatch(&[]).0, EXIT_USAGE);
    assert_eq!(dispatch(&["synth"]).0, EXIT_USAGE);
    assert_eq!(dispatch(&["synth", "--model", "heston"]).0, EXIT_USAGE);
    assert_eq!(dispatch(&["bench"]).0, EXIT_USAGE);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let (code, _, err) = dispatch(&["prepare", "--input", missing.to_str().unwrap()]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("nope.csv"), "{err}");
}

#[test]
fn synth_is_deterministic() {
    let a = dispatch(&["synth", "--model", "garch11", "--T", "1000", "--seed", "7"]);
    let b = dispatch(&["synth", "--model", "garch11", "--T", "1000", "--seed", "7"]);
    let c = dispatch(&["synth", "--model", "garch11", "--T", "1000", "--seed", "8"]);
    assert_eq!(a.0, EXIT_OK);
    assert_eq!(a.1, b.1);
    assert_ne!(a.1, c.1);
    let text = a.1;
    assert_eq!(text.lines().count(), 1001);
    assert!(text.starts_with("t,x,variance\n"));
}

#[test]
fn synth_sv_and_custom_spec_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, _, err) = dispatch(&["synth", "--model", "sv", "--T", "50", "--out", out]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(dir.path().join("synth_sv.csv").exists());

    let cfg = dir.path().join("gjr.toml");
    std::fs::write(&cfg, "alpha0 = 0.05\nalpha = [0.05]\ngamma_lev = [0.1]\nbeta = [0.85]\n").unwrap();
    let (code, _, err) = dispatch(&[
        "synth",
        "--model",
        "gjr(1,1,1)",
        "--T",
        "20",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let text = std::fs::read_to_string(dir.path().join("synth_gjr_1_1_1_.csv")).unwrap();
    assert_eq!(text.lines().count(), 21);
}

#[test]
fn prepare_fit_forecast_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let prices = dir.path().join("prices.csv");
    write_prices(&prices, 3, 260, 5);
    let panel = dir.path().join("panel");
    let (code, out, err) = dispatch(&[
        "prepare",
        "--input",
        prices.to_str().unwrap(),
        "--train-len",
        "200",
        "--out",
        panel.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("x 3 series"), "{out}");
    assert!(panel.join("panel.csv").exists());
    assert!(panel.join("panel.meta.toml").exists());

    for model in ["constant", "garch(1,1)", "nsvm-corr"] {
        let fit_dir = dir.path().join(model.replace(['(', ')', ','], "_"));
        let (code, _, err) = dispatch(&[
            "fit",
            "--panel",
            panel.to_str().unwrap(),
            "--model",
            model,
            "--epochs",
            "2",
            "--out",
            fit_dir.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK, "{model}: {err}");
        let file = if model.starts_with("nsvm") {
            assert!(fit_dir.join("training_log.csv").exists());
            fit_dir.join("model.ckpt")
        } else {
            fit_dir.join("model.toml")
        };
        let fc_dir = fit_dir.join("fc");
        let (code, out, err) = dispatch(&[
            "forecast",
            "--panel",
            panel.to_str().unwrap(),
            "--model-file",
            file.to_str().unwrap(),
            "--paths",
            "5",
            "--retrain-interval",
            "30",
            "--out",
            fc_dir.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK, "{model}: {err}");
        assert!(out.contains("test steps"), "{out}");
        let records = std::fs::read_to_string(fc_dir.join("forecasts.csv")).unwrap();
        let mut lines = records.lines();
        assert_eq!(lines.next().unwrap(), "step,var_0,var_1,var_2,x_0,x_1,x_2,nll");
        let rows: Vec<_> = lines.collect();
        assert!(!rows.is_empty());
        for row in rows {
            let nll: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
            assert!(nll.is_finite(), "{model}: {row}");
        }
        assert!(fc_dir.join("plot.csv").exists());
    }
}

#[test]
fn fit_rejects_unknown_model() {
    let (code, _, err) = dispatch(&["fit", "--panel", "/nonexistent", "--model", "lstm"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("lstm"));
}

#[test]
fn bench_smoke_config_is_reproducible() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|sub| {
            let out = dir.path().join(sub);
            let (code, _, err) = dispatch(&["bench", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
            assert_eq!(code, EXIT_OK, "{err}");
            assert!(out.join("report.txt").exists());
            std::fs::read(out.join("report.csv")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}
