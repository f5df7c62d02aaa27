//! Detectability of Gaussian logit perturbations.
//!
//! For logits `z` with teacher distribution `P_T = softmax(z)` and a noise
//! vector `eps` with `E‖eps‖² = σ²`, the perturbed distribution
//! `P_P = softmax(z + eps)` satisfies `E[KL(P_P ‖ P_T)] ≤ σ²/2`, and the bound
//! adds up over independently perturbed positions. This module provides the
//! numerical pieces needed to check that claim: a stable log-sum-exp `Φ`,
//! KL divergence, the Bregman form `KL = D_Φ(z, z + eps)`, the Hessian
//! quadratic form as a variance, and seeded Monte Carlo estimates.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Slack, in standard errors, granted to Monte Carlo bound checks.
pub const BOUND_SLACK_SE: f64 = 3.0;

/// Probability vectors must sum to one within this tolerance.
pub const NORMALIZATION_TOL: f64 = 1e-12;

const MC_BATCH: usize = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("empty vector")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("entry {index} is negative or not finite")]
    InvalidEntry { index: usize },
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("support violation at index {index}: p > 0 where q = 0")]
    SupportViolation { index: usize },
}

/// How a noise scale σ² is spread over the `V` logit coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConvention {
    /// Coordinate variance σ²/V, so that `E‖eps‖² = σ²`.
    TotalNorm,
    /// Coordinate variance σ², so that `E‖eps‖² = Vσ²`.
    PerCoordinate,
}

impl NoiseConvention {
    /// Standard deviation of each noise coordinate.
    pub fn coordinate_std(self, sigma2: f64, vocab: usize) -> f64 {
        match self {
            NoiseConvention::TotalNorm => (sigma2 / vocab as f64).sqrt(),
            NoiseConvention::PerCoordinate => sigma2.sqrt(),
        }
    }

    /// `E‖eps‖²` for this convention.
    pub fn expected_norm_sq(self, sigma2: f64, vocab: usize) -> f64 {
        match self {
            NoiseConvention::TotalNorm => sigma2,
            NoiseConvention::PerCoordinate => sigma2 * vocab as f64,
        }
    }
}

impl fmt::Display for NoiseConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseConvention::TotalNorm => "total_norm",
            NoiseConvention::PerCoordinate => "per_coordinate",
        })
    }
}

impl FromStr for NoiseConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "total_norm" | "total-norm" => Ok(NoiseConvention::TotalNorm),
            "per_coordinate" | "per-coordinate" => Ok(NoiseConvention::PerCoordinate),
            other => Err(format!("unknown noise convention {other:?}")),
        }
    }
}

/// `Φ(z) = log Σ exp(z_w)`, computed with a max shift.
pub fn log_sum_exp(z: &[f64]) -> Result<f64, DetectError> {
    if z.is_empty() {
        return Err(DetectError::Empty);
    }
    Ok(lse(z))
}

fn lse(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let phi = lse(z);
    z.iter().map(|&v| v - phi).collect()
}

fn check_distribution(p: &[f64]) -> Result<(), DetectError> {
    if let Some(index) = p.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(DetectError::InvalidEntry { index });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(DetectError::NotNormalized(sum));
    }
    Ok(())
}

/// `KL(p ‖ q) = Σ p log(p/q)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, DetectError> {
    if p.len() != q.len() {
        return Err(DetectError::LengthMismatch(p.len(), q.len()));
    }
    if p.is_empty() {
        return Err(DetectError::Empty);
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let mut kl = 0.0;
    for (index, (&pv, &qv)) in p.iter().zip(q).enumerate() {
        if pv == 0.0 {
            continue;
        }
        if qv == 0.0 {
            return Err(DetectError::SupportViolation { index });
        }
        kl += pv * (pv / qv).ln();
    }
    Ok(kl.max(0.0))
}

/// `KL(softmax(a) ‖ softmax(b))` evaluated in log space.
pub fn kl_softmax(a: &[f64], b: &[f64]) -> f64 {
    let la = log_softmax(a);
    let lb = log_softmax(b);
    la.iter()
        .zip(&lb)
        .map(|(&x, &y)| x.exp() * (x - y))
        .sum::<f64>()
        .max(0.0)
}

fn shifted(z: &[f64], eps: &[f64], t: f64) -> Vec<f64> {
    z.iter().zip(eps).map(|(a, b)| a + t * b).collect()
}

/// `D_Φ(z, z + eps) = Φ(z) − Φ(z + eps) + ⟨∇Φ(z + eps), eps⟩`.
pub fn bregman_divergence(z: &[f64], eps: &[f64]) -> f64 {
    let moved = shifted(z, eps, 1.0);
    let grad = softmax(&moved);
    lse(z) - lse(&moved) + grad.iter().zip(eps).map(|(g, e)| g * e).sum::<f64>()
}

/// `|KL(softmax(z + eps) ‖ softmax(z)) − D_Φ(z, z + eps)|`, with the KL side
/// evaluated by direct summation over probabilities.
pub fn bregman_identity_residual(z: &[f64], eps: &[f64]) -> Result<f64, DetectError> {
    if z.len() != eps.len() {
        return Err(DetectError::LengthMismatch(z.len(), eps.len()));
    }
    if z.is_empty() {
        return Err(DetectError::Empty);
    }
    let perturbed = softmax(&shifted(z, eps, 1.0));
    let teacher = softmax(z);
    let kl = kl_divergence(&perturbed, &teacher)?;
    Ok((kl - bregman_divergence(z, eps)).abs())
}

/// The Hessian quadratic form `epsᵀ(diag(P) − PPᵀ)eps` under `P = softmax(z)`,
/// next to the variance of the components of `eps` under `P`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceForm {
    pub quadratic_form: f64,
    pub variance: f64,
    pub norm_sq: f64,
}

impl VarianceForm {
    pub fn residual(&self) -> f64 {
        (self.quadratic_form - self.variance).abs()
    }

    /// `quadratic_form ≤ ‖eps‖²`, the step that turns the integral form into σ²/2.
    pub fn bounded_by_norm(&self) -> bool {
        self.quadratic_form <= self.norm_sq
    }
}

pub fn variance_form(z: &[f64], eps: &[f64]) -> Result<VarianceForm, DetectError> {
    if z.len() != eps.len() {
        return Err(DetectError::LengthMismatch(z.len(), eps.len()));
    }
    if z.is_empty() {
        return Err(DetectError::Empty);
    }
    let p = softmax(z);
    let n = p.len();
    // Explicit Hessian, so the two sides share no arithmetic.
    let mut quadratic_form = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            let h = if i == j {
                p[i] - p[i] * p[j]
            } else {
                -p[i] * p[j]
            };
            row += h * eps[j];
        }
        quadratic_form += eps[i] * row;
    }
    let mean: f64 = p.iter().zip(eps).map(|(a, b)| a * b).sum();
    let second: f64 = p.iter().zip(eps).map(|(a, b)| a * b * b).sum();
    Ok(VarianceForm {
        quadratic_form,
        variance: second - mean * mean,
        norm_sq: eps.iter().map(|e| e * e).sum(),
    })
}

pub fn variance_form_residual(z: &[f64], eps: &[f64]) -> Result<f64, DetectError> {
    variance_form(z, eps).map(|v| v.residual())
}

/// Monte Carlo estimate of an expected KL, checked against its bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
    pub bound: f64,
    /// `mean + 3·std_error ≤ bound`.
    pub bound_satisfied: bool,
}

impl KlEstimate {
    fn new(stats: Moments, bound: f64) -> Self {
        let std_error = stats.std_error();
        KlEstimate {
            mean: stats.mean,
            std_error,
            samples: stats.count,
            bound,
            bound_satisfied: stats.mean + BOUND_SLACK_SE * std_error <= bound,
        }
    }
}

/// Streaming mean and sum of squared deviations, mergeable across batches.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, other: Moments) -> Moments {
        if self.count == 0 {
            return other;
        }
        if other.count == 0 {
            return self;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / count as f64;
        let m2 = self.m2
            + other.m2
            + delta * delta * (self.count as f64 * other.count as f64) / count as f64;
        Moments { count, mean, m2 }
    }

    fn std_error(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let var = (self.m2 / (self.count - 1) as f64).max(0.0);
        (var / self.count as f64).sqrt()
    }
}

/// Averages a sampler over `samples` draws in fixed-size batches; `sampler`
/// builds one sampling closure (with its own scratch space) per batch.
///
/// Batch `b` uses seed `derive(seed, b)` and batches merge in index order, so
/// the result does not depend on how many threads run the batches.
fn batched_mean<M, F>(samples: usize, seed: u64, sampler: M) -> Moments
where
    M: Fn() -> F + Sync,
    F: FnMut(&mut seed::Rng) -> f64,
{
    let batches = samples.div_ceil(MC_BATCH);
    let parts: Vec<Moments> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed::rng(seed::derive(seed, b as u64));
            let n = MC_BATCH.min(samples - b * MC_BATCH);
            let mut sample = sampler();
            let mut m = Moments::default();
            for _ in 0..n {
                m.push(sample(&mut rng));
            }
            m
        })
        .collect();
    parts.into_iter().fold(Moments::default(), Moments::merge)
}

/// KL of one perturbed draw, reusing buffers; `log_q` is `log_softmax(z)`.
fn perturbed_kl(z: &[f64], log_q: &[f64], std: f64, rng: &mut seed::Rng, buf: &mut [f64]) -> f64 {
    for (b, &v) in buf.iter_mut().zip(z) {
        let xi: f64 = StandardNormal.sample(rng);
        *b = v + std * xi;
    }
    let phi = lse(buf);
    buf.iter()
        .zip(log_q)
        .map(|(&v, &lq)| {
            let lp = v - phi;
            lp.exp() * (lp - lq)
        })
        .sum::<f64>()
        .max(0.0)
}

/// The single-position bound: σ²/2 under the total-norm convention and Vσ²/2
/// under the per-coordinate convention.
pub fn single_token_bound(sigma2: f64, convention: NoiseConvention, vocab: usize) -> f64 {
    convention.expected_norm_sq(sigma2, vocab) / 2.0
}

/// Estimates `E[KL(softmax(z + eps) ‖ softmax(z))]` from `samples` noise draws.
pub fn monte_carlo_expected_kl(
    z: &[f64],
    sigma2: f64,
    convention: NoiseConvention,
    samples: usize,
    seed: u64,
) -> KlEstimate {
    assert!(!z.is_empty() && samples >= 1 && sigma2 >= 0.0);
    let std = convention.coordinate_std(sigma2, z.len());
    let log_q = log_softmax(z);
    let log_q = &log_q;
    let stats = batched_mean(samples, seed, || {
        let mut buf = vec![0.0; z.len()];
        move |rng: &mut seed::Rng| perturbed_kl(z, log_q, std, rng, &mut buf)
    });
    KlEstimate::new(stats, single_token_bound(sigma2, convention, z.len()))
}

/// Estimates the expected joint KL over `logits.len()` independently
/// perturbed positions, against the bound `k·σ²/2` (per-coordinate: `k·Vσ²/2`).
pub fn monte_carlo_joint_kl(
    logits: &[Vec<f64>],
    sigma2: f64,
    convention: NoiseConvention,
    samples: usize,
    seed: u64,
) -> KlEstimate {
    assert!(!logits.is_empty() && samples >= 1 && sigma2 >= 0.0);
    let prepared: Vec<(f64, Vec<f64>)> = logits
        .iter()
        .map(|z| (convention.coordinate_std(sigma2, z.len()), log_softmax(z)))
        .collect();
    let stats = batched_mean(samples, seed, || {
        let mut bufs: Vec<Vec<f64>> = logits.iter().map(|z| vec![0.0; z.len()]).collect();
        let prepared = &prepared;
        move |rng: &mut seed::Rng| {
            logits
                .iter()
                .zip(prepared)
                .zip(bufs.iter_mut())
                .map(|((z, (std, log_q)), buf)| perturbed_kl(z, log_q, *std, rng, buf))
                .sum()
        }
    });
    let bound = logits
        .iter()
        .map(|z| single_token_bound(sigma2, convention, z.len()))
        .sum();
    KlEstimate::new(stats, bound)
}

/// Sum of per-position KLs against the `k` position bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointKl {
    pub sum: f64,
    pub bound: f64,
    pub satisfied: bool,
}

/// Joint KL of `k` conditionally independent positions: the per-position
/// divergences add, and the total is compared with `kσ²/2`.
pub fn joint_kl_k_tokens(
    per_token_kls: &[f64],
    k: usize,
    sigma2: f64,
) -> Result<JointKl, DetectError> {
    if per_token_kls.len() != k {
        return Err(DetectError::LengthMismatch(per_token_kls.len(), k));
    }
    let sum: f64 = per_token_kls.iter().sum();
    let bound = k as f64 * sigma2 / 2.0;
    Ok(JointKl {
        sum,
        bound,
        satisfied: sum <= bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_values() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[1000.0, 1000.0]).unwrap(), 1000.0 + 2f64.ln());
        assert_eq!(log_sum_exp(&[0.0]).unwrap(), 0.0);
        assert_eq!(log_sum_exp(&[]), Err(DetectError::Empty));
        assert_eq!(log_sum_exp(&[-1e4, 5.0]).unwrap(), 5.0);
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        // 0.75 ln 1.5 + 0.25 ln 0.5
        let v = kl_divergence(&[0.75, 0.25], &[0.5, 0.5]).unwrap();
        assert!((v - 0.130_812_035_941_137_7).abs() < 1e-12, "{v}");
    }

    #[test]
    fn kl_errors() {
        assert_eq!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]),
            Err(DetectError::SupportViolation { index: 1 })
        );
        assert_eq!(
            kl_divergence(&[1.0], &[0.5, 0.5]),
            Err(DetectError::LengthMismatch(1, 2))
        );
        assert!(matches!(
            kl_divergence(&[0.5, 0.6], &[0.5, 0.5]),
            Err(DetectError::NotNormalized(_))
        ));
        assert_eq!(
            kl_divergence(&[-0.1, 1.1], &[0.5, 0.5]),
            Err(DetectError::InvalidEntry { index: 0 })
        );
    }

    #[test]
    fn bregman_edge_cases() {
        let z = [0.3, -1.2, 2.0];
        assert_eq!(bregman_identity_residual(&z, &[0.0; 3]).unwrap(), 0.0);
        let eps = [0.5, 0.1, -0.7];
        let r0 = bregman_identity_residual(&z, &eps).unwrap();
        let zs: Vec<f64> = z.iter().map(|v| v + 17.0).collect();
        let r1 = bregman_identity_residual(&zs, &eps).unwrap();
        assert!(r0 <= 1e-12 && r1 <= 1e-12);
    }

    #[test]
    fn variance_form_edge_cases() {
        let z = [0.2, 1.0, -0.4, 0.0];
        let c = variance_form(&z, &[2.5; 4]).unwrap();
        assert!(c.quadratic_form.abs() < 1e-12 && c.variance.abs() < 1e-12);

        let p = softmax(&z);
        for v in 0..4 {
            let mut e = [0.0; 4];
            e[v] = 1.0;
            let f = variance_form(&z, &e).unwrap();
            assert!((f.variance - p[v] * (1.0 - p[v])).abs() < 1e-15);
            assert!(f.bounded_by_norm());
            assert!(f.residual() < 1e-15);
        }
    }

    #[test]
    fn zero_noise_is_exactly_zero() {
        let est =
            monte_carlo_expected_kl(&[0.4, -2.0, 1.0], 0.0, NoiseConvention::TotalNorm, 1000, 5);
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.std_error, 0.0);
        assert_eq!(est.bound, 0.0);
        assert!(est.bound_satisfied);
    }

    #[test]
    fn moments_merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let mut all = Moments::default();
        xs.iter().for_each(|&x| all.push(x));
        let (a, b) = xs.split_at(313);
        let mut ma = Moments::default();
        let mut mb = Moments::default();
        a.iter().for_each(|&x| ma.push(x));
        b.iter().for_each(|&x| mb.push(x));
        let merged = ma.merge(mb);
        assert_eq!(merged.count, all.count);
        assert!((merged.mean - all.mean).abs() < 1e-12);
        assert!((merged.m2 - all.m2).abs() < 1e-8);
    }

    #[test]
    fn joint_bound() {
        let j = joint_kl_k_tokens(&[0.01], 1, 0.1).unwrap();
        assert_eq!(j.bound, 0.05);
        assert!(j.satisfied);
        let j = joint_kl_k_tokens(&[0.01, 0.02, 0.03], 3, 0.1).unwrap();
        assert!((j.bound - 0.15).abs() < 1e-15);
        assert!((j.sum - 0.06).abs() < 1e-15);
        assert_eq!(
            joint_kl_k_tokens(&[0.1], 2, 0.1),
            Err(DetectError::LengthMismatch(1, 2))
        );
    }
}
