//! Gaussians whose precision is a diagonal plus a rank-K perturbation,
//! `Σ⁻¹ = D + V Vᵀ`.
//!
//! The factor `A` with `A Aᵀ = Σ` is built by starting from `D^{-1/2}` and
//! folding in one column of `V` at a time; the log-determinant comes from the
//! matrix determinant lemma and the density is evaluated in precision form,
//! so no dense inverse is ever formed.

use std::f64::consts::PI;

use thiserror::Error;

use crate::tensor::{Graph, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovarianceError {
    #[error("diagonal entry {index} must be positive, got {value}")]
    NonPositiveDiagonal { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("rank {rank} exceeds dimension {dim}")]
    RankTooLarge { rank: usize, dim: usize },
}

fn check_diag(d: &[f64]) -> Result<(), CovarianceError> {
    for (index, &value) in d.iter().enumerate() {
        if !(value > 0.0) {
            return Err(CovarianceError::NonPositiveDiagonal { index, value });
        }
    }
    Ok(())
}

fn check_columns(m: usize, v: &[Vec<f64>]) -> Result<(), CovarianceError> {
    if v.len() > m {
        return Err(CovarianceError::RankTooLarge { rank: v.len(), dim: m });
    }
    for col in v {
        if col.len() != m {
            return Err(CovarianceError::Dimension {
                expected: m,
                got: col.len(),
            });
        }
    }
    Ok(())
}

/// Factor `A` (row-major `M×M`) with `A Aᵀ = (diag(D) + V Vᵀ)⁻¹`.
///
/// Each column `v` applies `A ← A − [(1 − √η)/γ] A Aᵀ v vᵀ A` with
/// `γ = vᵀ A Aᵀ v` and `η = 1/(1 + γ)`. A zero column (γ = 0) leaves `A`
/// unchanged.
pub fn build_factor(d: &[f64], v: &[Vec<f64>]) -> Result<Vec<f64>, CovarianceError> {
    check_diag(d)?;
    let m = d.len();
    check_columns(m, v)?;
    let mut a = vec![0.0; m * m];
    for (i, di) in d.iter().enumerate() {
        a[i * m + i] = di.powf(-0.5);
    }
    let mut u = vec![0.0; m];
    let mut w = vec![0.0; m];
    for col in v {
        // u = Aᵀv, w = A u = A Aᵀ v, γ = |u|²
        u.iter_mut().for_each(|x| *x = 0.0);
        for (i, vi) in col.iter().enumerate() {
            let row = &a[i * m..(i + 1) * m];
            for (uj, aij) in u.iter_mut().zip(row) {
                *uj += aij * vi;
            }
        }
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = a[i * m..(i + 1) * m].iter().zip(&u).map(|(x, y)| x * y).sum();
        }
        let gamma: f64 = u.iter().map(|x| x * x).sum();
        if gamma == 0.0 {
            continue;
        }
        let eta = 1.0 / (1.0 + gamma);
        let c = (1.0 - eta.sqrt()) / gamma;
        for i in 0..m {
            let cw = c * w[i];
            for (aij, uj) in a[i * m..(i + 1) * m].iter_mut().zip(&u) {
                *aij -= cw * uj;
            }
        }
    }
    Ok(a)
}

/// Cholesky log-determinant of a small symmetric positive-definite matrix.
fn spd_log_det(mut s: Vec<f64>, k: usize) -> f64 {
    let mut log_det = 0.0;
    for j in 0..k {
        let mut diag = s[j * k + j];
        for p in 0..j {
            diag -= s[j * k + p] * s[j * k + p];
        }
        let l = diag.sqrt();
        s[j * k + j] = l;
        log_det += 2.0 * l.ln();
        for i in j + 1..k {
            let mut x = s[i * k + j];
            for p in 0..j {
                x -= s[i * k + p] * s[j * k + p];
            }
            s[i * k + j] = x / l;
        }
    }
    log_det
}

/// `ln det Σ = −Σ ln D_i − ln det(I + Vᵀ D⁻¹ V)`.
pub fn log_det_sigma(d: &[f64], v: &[Vec<f64>]) -> Result<f64, CovarianceError> {
    check_diag(d)?;
    check_columns(d.len(), v)?;
    let k = v.len();
    let mut cap = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..=a {
            let s: f64 = v[a].iter().zip(&v[b]).zip(d).map(|((x, y), di)| x * y / di).sum();
            cap[a * k + b] = s + if a == b { 1.0 } else { 0.0 };
            cap[b * k + a] = cap[a * k + b];
        }
    }
    let log_d: f64 = d.iter().map(|x| x.ln()).sum();
    Ok(-log_d - spd_log_det(cap, k))
}

/// Reparameterised draw `z = mu + A eps`, with `A` row-major `M×M`.
pub fn sample(mu: &[f64], a: &[f64], eps: &[f64]) -> Result<Vec<f64>, CovarianceError> {
    let m = mu.len();
    if eps.len() != m {
        return Err(CovarianceError::Dimension { expected: m, got: eps.len() });
    }
    if a.len() != m * m {
        return Err(CovarianceError::Dimension { expected: m * m, got: a.len() });
    }
    Ok((0..m)
        .map(|i| mu[i] + a[i * m..(i + 1) * m].iter().zip(eps).map(|(x, y)| x * y).sum::<f64>())
        .collect())
}

/// Gaussian log-density with precision `diag(D) + V Vᵀ`.
pub fn log_pdf(x: &[f64], mu: &[f64], d: &[f64], v: &[Vec<f64>]) -> Result<f64, CovarianceError> {
    let m = d.len();
    for len in [x.len(), mu.len()] {
        if len != m {
            return Err(CovarianceError::Dimension { expected: m, got: len });
        }
    }
    let log_det = log_det_sigma(d, v)?;
    let r: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut quad: f64 = r.iter().zip(d).map(|(ri, di)| di * ri * ri).sum();
    for col in v {
        let s: f64 = col.iter().zip(&r).map(|(a, b)| a * b).sum();
        quad += s * s;
    }
    Ok(-0.5 * m as f64 * (2.0 * PI).ln() - 0.5 * log_det - 0.5 * quad)
}

/// A diagonal-plus-low-rank Gaussian precision with its cached factor.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankGaussian {
    d: Vec<f64>,
    v: Vec<Vec<f64>>,
    factor: Vec<f64>,
}

impl LowRankGaussian {
    pub fn new(d: Vec<f64>, v: Vec<Vec<f64>>) -> Result<Self, CovarianceError> {
        let factor = build_factor(&d, &v)?;
        Ok(Self { d, v, factor })
    }

    /// Diagonal covariance `diag(var)`, i.e. `D = 1/var` and no columns.
    pub fn diagonal(var: &[f64]) -> Result<Self, CovarianceError> {
        Self::new(var.iter().map(|s| 1.0 / s).collect(), Vec::new())
    }

    /// Base variances `var` plus one precision column `v`: `Σ⁻¹ = diag(1/var) + v vᵀ`.
    pub fn from_variance_and_column(var: &[f64], v: Option<&[f64]>) -> Result<Self, CovarianceError> {
        let cols = v.map(|c| vec![c.to_vec()]).unwrap_or_default();
        Self::new(var.iter().map(|s| 1.0 / s).collect(), cols)
    }

    pub fn dim(&self) -> usize {
        self.d.len()
    }

    pub fn rank(&self) -> usize {
        self.v.len()
    }

    pub fn precision_diag(&self) -> &[f64] {
        &self.d
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Row-major `M×M` factor `A` with `A Aᵀ = Σ`.
    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    pub fn set_precision(&mut self, d: Vec<f64>, v: Vec<Vec<f64>>) -> Result<(), CovarianceError> {
        *self = Self::new(d, v)?;
        Ok(())
    }

    pub fn log_det_sigma(&self) -> f64 {
        log_det_sigma(&self.d, &self.v).expect("validated at construction")
    }

    pub fn log_pdf(&self, x: &[f64], mu: &[f64]) -> Result<f64, CovarianceError> {
        log_pdf(x, mu, &self.d, &self.v)
    }

    pub fn sample(&self, mu: &[f64], eps: &[f64]) -> Result<Vec<f64>, CovarianceError> {
        sample(mu, &self.factor, eps)
    }

    /// Diagonal of `Σ`, read off the cached factor.
    pub fn covariance_diag(&self) -> Vec<f64> {
        let m = self.dim();
        (0..m)
            .map(|i| self.factor[i * m..(i + 1) * m].iter().map(|x| x * x).sum())
            .collect()
    }

    /// Dense `Σ = A Aᵀ`, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let m = self.dim();
        let a = &self.factor;
        let mut s = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..=i {
                let x: f64 = a[i * m..(i + 1) * m].iter().zip(&a[j * m..(j + 1) * m]).map(|(p, q)| p * q).sum();
                s[i * m + j] = x;
                s[j * m + i] = x;
            }
        }
        s
    }
}

/// Graph-level row-wise Gaussian log-density for rank 0 or 1 precision
/// perturbations.
///
/// `x`, `mu`, `log_var` (and `column`, when present) are `[R, M]` or `[M]`;
/// the base precision is `D = exp(−log_var)` and the optional column adds
/// `v vᵀ`. Returns one log-density per row.
pub fn log_pdf_node(
    g: &mut Graph,
    x: NodeId,
    mu: NodeId,
    log_var: NodeId,
    column: Option<NodeId>,
    dim: usize,
) -> NodeId {
    let r = g.sub(x, mu);
    let r2 = g.square(r);
    let neg = g.neg(log_var);
    let prec = g.exp(neg);
    let weighted = g.mul(r2, prec);
    let mut quad = g.sum_last(weighted);
    let mut log_det = g.sum_last(log_var);
    if let Some(v) = column {
        // ln det Σ = Σ ln var − ln(1 + vᵀ diag(var) v)
        let vr = g.mul(v, r);
        let s = g.sum_last(vr);
        let s2 = g.square(s);
        quad = g.add(quad, s2);
        let v2 = g.square(v);
        let var = g.exp(log_var);
        let v2var = g.mul(v2, var);
        let gamma = g.sum_last(v2var);
        let one_plus = g.offset(gamma, 1.0);
        let correction = g.log(one_plus);
        log_det = g.sub(log_det, correction);
    }
    let total = g.add(log_det, quad);
    let half = g.scale(total, -0.5);
    g.offset(half, -0.5 * dim as f64 * (2.0 * PI).ln())
}
