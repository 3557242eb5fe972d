//! Acceptance criteria 1-9, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so every line reaches the terminal.
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 1 5 8`.

use std::io::Write;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use volnet::covariance::{self, LowRankGaussian};
use volnet::eval::{run_experiment, ExperimentConfig};
use volnet::forecast::{self, NsvmForecaster, RollingOptions};
use volnet::garch::{self, GarchParams, GarchSpec};
use volnet::nsvm::{self, obs_step, prior_step, Nsvm, NsvmConfig, TrainingLog};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- 1

fn covariance_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_factor, mut worst_logdet) = (0.0_f64, 0.0_f64);
    for _ in 0..200 {
        let m = rng.random_range(2..=64);
        let k = rng.random_range(0..=4usize).min(m);
        let d: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..3.0)).collect();
        let v: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| normal(&mut rng)).collect()).collect();

        let a = covariance::build_factor(&d, &v).expect("factor");
        let a = DMatrix::from_row_slice(m, m, &a);
        let mut precision = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d.clone()));
        for col in &v {
            let c = nalgebra::DVector::from_column_slice(col);
            precision += &c * c.transpose();
        }
        let sigma = precision.clone().try_inverse().expect("dense inverse");
        let rel = (&a * a.transpose() - &sigma).norm() / sigma.norm();
        worst_factor = worst_factor.max(rel);

        let dense = -precision.cholesky().expect("spd").l().diagonal().map(|x| x.ln()).sum() * 2.0;
        let ours = covariance::log_det_sigma(&d, &v).expect("log det");
        worst_logdet = worst_logdet.max((ours - dense).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst_factor < 1e-8 && worst_logdet < 1e-9 && secs < 10.0,
        format!("max rel factor err {worst_factor:.2e}, max log-det err {worst_logdet:.2e}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- 2

fn tiny_config(rank: usize) -> NsvmConfig {
    NsvmConfig {
        obs_dim: 2,
        latent_dim: 2,
        hidden_dim: 3,
        covariance_rank: rank,
        dropout_rate: 0.0,
        l2_weight: 0.0,
        ..NsvmConfig::default()
    }
}

fn randomized_model(config: NsvmConfig, seed: u64) -> Nsvm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Nsvm::new(config, &mut rng).expect("model");
    for t in m.params.values_mut() {
        for v in t.data_mut() {
            *v += 0.2 * normal(&mut rng);
        }
    }
    m.factor_active = m.config.covariance_rank == 1;
    m
}

fn numeric_elbo(m: &Nsvm, x: &[Vec<f64>], batch: &nsvm::LatentPathBatch) -> f64 {
    let phi = m.generative().expect("phi");
    let psi = m.inference().expect("psi");
    nsvm::elbo_estimate(&phi, &psi, x, batch).expect("elbo")
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst = 0.0_f64;
    let mut count = 0;
    for rank in [0, 1] {
        let mut m = randomized_model(tiny_config(rank), 200 + rank as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<Vec<f64>> = (0..4).map(|_| vec![normal(&mut rng), normal(&mut rng)]).collect();
        let psi = m.inference().expect("psi");
        let batch = nsvm::infer_paths(&psi, &x, 2, &mut rng).expect("paths");
        let (value, grads) = m.elbo_gradient(&x, &batch.eps).expect("gradient");
        let reference = numeric_elbo(&m, &x, &batch);
        assert!((value - reference).abs() < 1e-10 * reference.abs().max(1.0), "{value} vs {reference}");

        let names: Vec<String> = m.params.keys().cloned().collect();
        for name in names {
            let n = m.params[&name].len();
            for i in 0..n {
                let orig = m.params[&name].data()[i];
                m.params.get_mut(&name).unwrap().data_mut()[i] = orig + h;
                let up = numeric_elbo(&m, &x, &batch);
                m.params.get_mut(&name).unwrap().data_mut()[i] = orig - h;
                let down = numeric_elbo(&m, &x, &batch);
                m.params.get_mut(&name).unwrap().data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[&name].data()[i];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
                count += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst < 1e-4 && secs < 30.0,
        format!("{count} coordinates, max rel err {worst:.2e}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- 3

/// Probabilists' Gauss-Hermite rule: `E[f(Z)] ≈ Σ w_i f(t_i)`, `Z ~ N(0,1)`.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let nodes = eig.eigenvalues.iter().copied().collect();
    let weights = (0..n).map(|i| eig.eigenvectors[(0, i)].powi(2)).collect();
    (nodes, weights)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln p(x_1, x_2)` by nested quadrature over `z_1` then `z_2 | z_1`.
fn quadrature_log_lik(m: &Nsvm, x: &[f64; 2], n: usize) -> f64 {
    let phi = m.generative().expect("phi");
    let (nodes, weights) = gauss_hermite(n);
    let hid = m.config.hidden_dim;
    let (hz1, mu1, var1) = prior_step(&phi, &vec![0.0; hid], &[0.0]).expect("prior");
    let mut outer = Vec::with_capacity(n);
    for (t1, w1) in nodes.iter().zip(&weights) {
        let z1 = mu1[0] + var1[0].sqrt() * t1;
        let (hx1, mx1, cx1) = obs_step(&phi, &vec![0.0; hid], &[0.0], &[z1]).expect("obs");
        let l1 = cx1.log_pdf(&[x[0]], &mx1).expect("pdf");
        let (_, mu2, var2) = prior_step(&phi, &hz1, &[z1]).expect("prior");
        let inner: Vec<f64> = nodes
            .iter()
            .zip(&weights)
            .map(|(t2, w2)| {
                let z2 = mu2[0] + var2[0].sqrt() * t2;
                let (_, mx2, cx2) = obs_step(&phi, &hx1, &[x[0]], &[z2]).expect("obs");
                w2.ln() + cx2.log_pdf(&[x[1]], &mx2).expect("pdf")
            })
            .collect();
        outer.push(w1.ln() + l1 + log_sum_exp(&inner));
    }
    log_sum_exp(&outer)
}

fn elbo_bound() -> Outcome {
    let start = Instant::now();
    let config = NsvmConfig {
        obs_dim: 1,
        latent_dim: 1,
        hidden_dim: 3,
        dropout_rate: 0.0,
        ..NsvmConfig::default()
    };
    let mut ok = 0;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_quad = 0.0_f64;
    for draw in 0..20u64 {
        let m = randomized_model(config.clone(), 300 + draw);
        let mut rng = ChaCha8Rng::seed_from_u64(400 + draw);
        let x = [normal(&mut rng), normal(&mut rng)];
        let exact = quadrature_log_lik(&m, &x, 120);
        worst_quad = worst_quad.max((exact - quadrature_log_lik(&m, &x, 80)).abs());

        let xs = vec![vec![x[0]], vec![x[1]]];
        let psi = m.inference().expect("psi");
        let phi = m.generative().expect("phi");
        let batch = nsvm::infer_paths(&psi, &xs, 10_000, &mut rng).expect("paths");
        let per = nsvm::elbo_paths(&phi, &psi, &xs, &batch).expect("elbo");
        let s = per.len() as f64;
        let mean = per.iter().sum::<f64>() / s;
        let sd = (per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1.0)).sqrt();
        let se = sd / s.sqrt();
        let gap = (mean - exact) / se.max(f64::MIN_POSITIVE);
        worst_gap = worst_gap.max(gap);
        if mean <= exact + 3.0 * se {
            ok += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        ok == 20,
        format!(
            "{ok}/20 draws within bound, max (ELBO - log p)/SE {worst_gap:.2}, quadrature 80 vs 120 nodes {worst_quad:.1e}, {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn garch_recovery() -> Outcome {
    let spec = GarchSpec::garch(1, 1);
    let truth = GarchParams {
        alpha0: 0.05,
        alpha: vec![0.1],
        beta: vec![0.85],
        ..GarchParams::default()
    };
    let mut ok = 0;
    let mut slowest = Duration::ZERO;
    for seed in 0..20u64 {
        let sim = garch::simulate_garch(&spec, &truth, 5000, 1000 + seed).expect("simulate");
        let t0 = Instant::now();
        let fit = garch::fit_mle(&spec, &sim.x, None).expect("fit");
        slowest = slowest.max(t0.elapsed());
        let p = &fit.params;
        if (p.alpha0 - 0.05).abs() <= 0.05 && (p.alpha[0] - 0.1).abs() <= 0.05 && (p.beta[0] - 0.85).abs() <= 0.05 {
            ok += 1;
        }
    }
    Outcome::new(
        ok >= 18 && slowest < Duration::from_secs(60),
        format!("{ok}/20 trials within ±0.05, slowest fit {:.2}s", slowest.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 5

fn degenerate_exactness() -> Outcome {
    let mut worst = 0.0_f64;
    let mut spread = 0.0_f64;
    for (obs, latent, rank) in [(1, 1, 0), (3, 2, 0), (4, 3, 1)] {
        let config = NsvmConfig {
            obs_dim: obs,
            latent_dim: latent,
            hidden_dim: 5,
            covariance_rank: rank,
            ..NsvmConfig::default()
        };
        let mut m = Nsvm::zeros(config).expect("zeros");
        m.factor_active = rank == 1;
        let mut rng = ChaCha8Rng::seed_from_u64(500 + obs as u64);
        let x: Vec<Vec<f64>> = (0..12).map(|_| (0..obs).map(|_| 2.0 * normal(&mut rng)).collect()).collect();
        let oracle: f64 = x.iter().flatten().map(|v| -0.5 * (v * v + LN_2PI)).sum();
        let (phi, psi) = (m.generative().expect("phi"), m.inference().expect("psi"));
        let batch = nsvm::infer_paths(&psi, &x, 25, &mut rng).expect("paths");
        let est = nsvm::elbo_estimate(&phi, &psi, &x, &batch).expect("elbo");
        worst = worst.max((est - oracle).abs());
        let per = nsvm::elbo_paths(&phi, &psi, &x, &batch).expect("paths");
        let lo = per.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = per.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        spread = spread.max(hi - lo);
    }
    Outcome::new(
        worst <= 1e-12 && spread == 0.0,
        format!("max |ELBO - iid N(0,1) log-lik| {worst:.1e}, max path spread {spread:.1e}"),
    )
}

// ---------------------------------------------------------------- 6

fn forecast_calibration() -> Outcome {
    let config = NsvmConfig {
        obs_dim: 2,
        latent_dim: 2,
        hidden_dim: 4,
        ..NsvmConfig::default()
    };
    let model = Nsvm::zeros(config).expect("zeros");
    let mut f = NsvmForecaster::new("nsvm-zero", model, TrainingLog::default(), 1);
    f.paths = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let panel: Vec<Vec<f64>> = (0..1100).map(|_| vec![normal(&mut rng), normal(&mut rng)]).collect();
    let opts = RollingOptions {
        retrain: false,
        ..RollingOptions::default()
    };
    let out = forecast::rolling_forecast(&mut f, &panel, 100, opts).expect("rolling");
    let nll = out.mean_nll();
    let entropy = 0.5 * LN_2PI + 0.5;
    let nll_ok = (nll - 0.919).abs() <= 0.03;

    let (mass, se) = mixture_mass();
    let mass_ok = (mass - 1.0).abs() <= 0.02;
    Outcome::new(
        nll_ok && mass_ok,
        format!(
            "mean NLL {nll:.4} over {} steps (target 0.919 ± 0.03; N(0,1) entropy is {entropy:.4}), mixture mass {mass:.4} ± {se:.4}",
            out.records.len()
        ),
    )
}

/// Importance-sampling estimate of the total mass of a trained-looking
/// predictive mixture, with a broad Gaussian proposal.
fn mixture_mass() -> (f64, f64) {
    let config = NsvmConfig {
        obs_dim: 2,
        latent_dim: 2,
        hidden_dim: 4,
        covariance_rank: 1,
        ..NsvmConfig::default()
    };
    let m = randomized_model(config, 650);
    let mut rng = ChaCha8Rng::seed_from_u64(651);
    let hist: Vec<Vec<f64>> = (0..30).map(|_| vec![normal(&mut rng), normal(&mut rng)]).collect();
    let mix = forecast::predict_one_step(&m, &hist, None, 20, &mut rng).expect("predict");
    let (mean, _) = forecast::mixture_moments(&mix);
    let mut scale: f64 = 0.0;
    for (mu, cov) in mix.means().iter().zip(mix.covariances()) {
        let dist: f64 = mu.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum();
        let trace: f64 = cov.covariance_diag().iter().sum();
        scale = scale.max(trace + dist);
    }
    let var = 2.0 * scale;
    let proposal = LowRankGaussian::diagonal(&vec![var; 2]).expect("proposal");
    let draws = 100_000;
    let ratios: Vec<f64> = (0..draws)
        .map(|_| {
            let x: Vec<f64> = mean.iter().map(|c| c + var.sqrt() * normal(&mut rng)).collect();
            (mix.log_pdf(&x).expect("pdf") - proposal.log_pdf(&x, &mean).expect("pdf")).exp()
        })
        .collect();
    let n = draws as f64;
    let est = ratios.iter().sum::<f64>() / n;
    let sd = (ratios.iter().map(|r| (r - est).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (est, sd / n.sqrt())
}

// ---------------------------------------------------------------- 7

fn column(report: &volnet::NllReport, model: &str) -> Vec<f64> {
    let j = report.models.iter().position(|m| m == model).expect("model column");
    report.values.iter().map(|row| row[j]).collect()
}

fn synthetic_ordering() -> Outcome {
    let start = Instant::now();
    let load = |name: &str| ExperimentConfig::load(&workspace_root().join("configs").join(name)).expect("config");
    let sv = run_experiment(&load("sv.toml"), None).expect("sv suite");
    let nsvm = column(&sv, "nsvm-diag");
    let constant = column(&sv, "constant");
    let sv_wins = nsvm.iter().zip(&constant).filter(|(a, b)| a < b).count();

    let gr = run_experiment(&load("garch11.toml"), None).expect("garch suite");
    let garch = column(&gr, "garch(1,1)");
    let constant_g = column(&gr, "constant");
    let garch_wins = garch.iter().zip(&constant_g).filter(|(a, b)| a < b).count();

    let secs = start.elapsed().as_secs_f64();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Outcome::new(
        sv_wins * 2 > nsvm.len() && garch_wins * 2 > garch.len() && secs < 1800.0,
        format!(
            "SV: nsvm-diag beats constant on {sv_wins}/{} (avg {:.4} vs {:.4}); GARCH: garch(1,1) beats constant on {garch_wins}/{} (avg {:.4} vs {:.4}); {secs:.0}s",
            nsvm.len(),
            mean(&nsvm),
            mean(&constant),
            garch.len(),
            mean(&garch),
            mean(&constant_g)
        ),
    )
}

// ---------------------------------------------------------------- 8

/// Direct ARCH/GARCH variance recursion with pre-sample values set to `init`.
fn garch_oracle(alpha0: f64, alpha: &[f64], beta: &[f64], x: &[f64], init: f64) -> Vec<f64> {
    let mut sq: Vec<f64> = vec![init; alpha.len()];
    let mut var: Vec<f64> = vec![init; beta.len().max(1)];
    let mut out = Vec::with_capacity(x.len());
    for &xt in x {
        sq.push(xt * xt);
        let mut s = alpha0;
        for (i, a) in alpha.iter().enumerate() {
            s += a * sq[sq.len() - 1 - i];
        }
        for (j, b) in beta.iter().enumerate() {
            s += b * var[var.len() - 1 - j];
        }
        var.push(s);
        out.push(s);
    }
    out
}

fn degeneracy_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let mut failures = Vec::new();
    for case in 0..100 {
        let p = rng.random_range(1..=3);
        let q = rng.random_range(1..=3);
        let alpha: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..0.3 / p as f64)).collect();
        let beta: Vec<f64> = (0..q).map(|_| rng.random_range(0.0..0.6 / q as f64)).collect();
        let alpha0 = rng.random_range(0.01..0.5);
        let init = rng.random_range(0.1..3.0);
        let x: Vec<f64> = (0..60).map(|_| normal(&mut rng)).collect();

        let arch = GarchParams {
            alpha0,
            alpha: alpha.clone(),
            ..GarchParams::default()
        };
        let ours = garch::variance_recursion(&GarchSpec::power(p, 0, 0, 2), &arch, &x, init).expect("arch");
        if ours != garch_oracle(alpha0, &alpha, &[], &x, init) {
            failures.push(format!("arch case {case}"));
        }
        let gp = GarchParams {
            beta: beta.clone(),
            ..arch
        };
        let ours = garch::variance_recursion(&GarchSpec::power(p, 0, q, 2), &gp, &x, init).expect("garch");
        if ours != garch_oracle(alpha0, &alpha, &beta, &x, init) {
            failures.push(format!("garch case {case}"));
        }

        let eg = GarchParams {
            alpha0: rng.random_range(-0.5..0.5),
            alpha: (0..p).map(|_| rng.random_range(-0.5..0.5)).collect(),
            theta: rng.random_range(-0.3..0.3),
            gamma_g: rng.random_range(0.0..0.3),
            ..GarchParams::default()
        };
        let a = garch::egarch_recursion(&eg, &x, rng.random_range(-3.0..3.0));
        let b = garch::egarch_recursion(&eg, &x, rng.random_range(-3.0..3.0));
        // out[t] is the log-variance of observation t + 1
        if a[p..] != b[p..] {
            failures.push(format!("egarch case {case}"));
        }
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            "ARCH, GARCH and EGARCH(q=0) identities bit-exact on 100 random inputs".to_string()
        } else {
            format!("mismatches: {}", failures.join(", "))
        },
    )
}

// ---------------------------------------------------------------- 9

fn bench_smoke() -> Outcome {
    let start = Instant::now();
    let cfg = workspace_root().join("configs/smoke.toml");
    let dir = tempfile::tempdir().expect("tempdir");
    let mut reports = Vec::new();
    for run in ["first", "second"] {
        let out = dir.path().join(run);
        let o = Command::new(env!("CARGO_BIN_EXE_volnet"))
            .args(["bench", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .expect("spawn volnet");
        if o.status.code() != Some(0) {
            return Outcome::new(
                false,
                format!("exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)),
            );
        }
        let csv = std::fs::read_to_string(out.join("report.csv")).expect("report.csv");
        let table_ok = out.join("report.txt").exists();
        reports.push((csv, table_ok));
    }
    let secs = start.elapsed().as_secs_f64();
    let (csv, table_ok) = &reports[0];
    let lines: Vec<&str> = csv.lines().collect();
    let shaped = lines.first().is_some_and(|h| h.starts_with("series,"))
        && lines.last().is_some_and(|l| l.starts_with("AVG,"))
        && lines.len() >= 3
        && *table_ok;
    let identical = reports[0].0 == reports[1].0;
    Outcome::new(
        shaped && identical && secs < 300.0,
        format!("report shaped {shaped}, byte-identical {identical}, two runs in {secs:.1}s"),
    )
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("covariance oracle equivalence", covariance_oracle),
        ("gradient correctness", gradient_check),
        ("ELBO bound", elbo_bound),
        ("GARCH recovery", garch_recovery),
        ("degenerate exactness", degenerate_exactness),
        ("forecast calibration", forecast_calibration),
        ("synthetic NLL ordering", synthetic_ordering),
        ("family degeneracy identities", degeneracy_identities),
        ("end-to-end smoke", bench_smoke),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    let mut stdout = std::io::stdout();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::new(false, format!("panicked: {msg}"))
            });
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(stdout, "criterion {n} ({name}): {tag} - {}", outcome.detail);
        let _ = stdout.flush();
        if !outcome.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        let _ = writeln!(stdout, "failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
