//! Sparse Gaussian perturbation of a toy teacher's logits.
//!
//! A poisoned sequence may differ from the teacher's only at a mask of at
//! most `k` positions. At each masked position the token is redrawn from
//! `softmax(logits + xi)` with Gaussian `xi`, and the noise scale obeys
//! `σ² ≤ 2η/k`, which caps the expected joint KL at `η`. Protected positions
//! (the answer) are never masked.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{softmax, NoiseConvention};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("condition 1 violated: k must be at least 1")]
    ZeroK,
    #[error("eta must be finite and non-negative, got {0}")]
    InvalidEta(f64),
    #[error("sigma2 must be finite and non-negative, got {0}")]
    InvalidSigma2(f64),
    #[error("condition 4 violated: sigma2 = {sigma2} exceeds 2*eta/k = {limit}")]
    Condition4 { sigma2: f64, limit: f64 },
    #[error("no eligible positions: all {0} positions are protected")]
    NoEligiblePositions(usize),
    #[error("mask has {size} positions but k = {k}")]
    MaskTooLarge { size: usize, k: usize },
    #[error("mask position {0} is protected")]
    ProtectedInMask(usize),
    #[error("mask position {position} is outside a sequence of length {len}")]
    MaskOutOfRange { position: usize, len: usize },
    #[error("logit table: {0}")]
    Table(String),
}

/// A toy teacher: one pre-softmax logit row per sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable {
    vocab_size: usize,
    rows: Vec<Vec<f64>>,
}

impl LogitTable {
    pub fn new(vocab_size: usize, rows: Vec<Vec<f64>>) -> Result<Self, SimError> {
        if vocab_size == 0 {
            return Err(SimError::Table("vocabulary size must be positive".into()));
        }
        for (t, row) in rows.iter().enumerate() {
            if row.len() != vocab_size {
                return Err(SimError::Table(format!(
                    "row {t} has {} entries, expected {vocab_size}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(SimError::Table(format!("row {t} has a non-finite entry")));
            }
        }
        Ok(LogitTable { vocab_size, rows })
    }

    /// Parses the text format: a `V=<int>` header, then one row of `V`
    /// whitespace-separated reals per line. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| SimError::Table("missing V=<int> header".into()))?;
        let vocab_size = header
            .trim()
            .strip_prefix("V=")
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| {
                SimError::Table(format!("bad header {:?}, expected V=<int>", header.trim()))
            })?;
        let mut rows = Vec::new();
        for (n, line) in lines {
            let row = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| SimError::Table(format!("line {}: {e}", n + 1)))?;
            rows.push(row);
        }
        Self::new(vocab_size, rows)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("V={}\n", self.vocab_size);
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    /// Generates `len` rows from an order-1 Markov teacher. Row `t` is
    /// `transition[prev]`, where `prev` is the token the teacher sampled at
    /// `t - 1` (row 0 uses `initial`).
    pub fn from_markov(teacher: &MarkovTeacher, len: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut rows = Vec::with_capacity(len);
        let mut current = teacher.initial.clone();
        for _ in 0..len {
            let token = sample_categorical(&softmax(&current), &mut rng);
            rows.push(current);
            current = teacher.transition[token].clone();
        }
        LogitTable {
            vocab_size: teacher.initial.len(),
            rows,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The teacher's greedy tokens: the argmax of each row, lowest index on ties.
    pub fn greedy_tokens(&self) -> Vec<usize> {
        self.rows.iter().map(|r| argmax(r)).collect()
    }
}

/// Order-1 Markov logit generator.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovTeacher {
    pub initial: Vec<f64>,
    /// `transition[v]` holds the logits that follow token `v`.
    pub transition: Vec<Vec<f64>>,
}

impl MarkovTeacher {
    /// Random teacher whose logits are `scale` times standard normals.
    pub fn random(vocab: usize, scale: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let row = |rng: &mut seed::Rng| -> Vec<f64> {
            (0..vocab)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(rng);
                    scale * x
                })
                .collect()
        };
        let initial = row(&mut rng);
        let transition = (0..vocab).map(|_| row(&mut rng)).collect();
        MarkovTeacher {
            initial,
            transition,
        }
    }
}

/// Parameters of the sparse Gaussian constraint set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintParams {
    /// Detectability budget η.
    pub eta: f64,
    /// Maximum number of perturbed positions per sequence.
    pub k: usize,
    pub sigma2: f64,
    pub noise_convention: NoiseConvention,
    pub protected_positions: BTreeSet<usize>,
}

impl ConstraintParams {
    pub fn new(eta: f64, k: usize, sigma2: f64) -> Self {
        ConstraintParams {
            eta,
            k,
            sigma2,
            noise_convention: NoiseConvention::TotalNorm,
            protected_positions: BTreeSet::new(),
        }
    }

    pub fn with_convention(mut self, convention: NoiseConvention) -> Self {
        self.noise_convention = convention;
        self
    }

    pub fn with_protected(mut self, positions: impl IntoIterator<Item = usize>) -> Self {
        self.protected_positions.extend(positions);
        self
    }
}

/// Accepts iff `k ≥ 1`, `η ≥ 0` and `σ² ≤ 2η/k`.
pub fn validate_params(p: &ConstraintParams) -> Result<(), SimError> {
    if p.k == 0 {
        return Err(SimError::ZeroK);
    }
    if !(p.eta.is_finite() && p.eta >= 0.0) {
        return Err(SimError::InvalidEta(p.eta));
    }
    if !(p.sigma2.is_finite() && p.sigma2 >= 0.0) {
        return Err(SimError::InvalidSigma2(p.sigma2));
    }
    let limit = 2.0 * p.eta / p.k as f64;
    if p.sigma2 > limit {
        return Err(SimError::Condition4 {
            sigma2: p.sigma2,
            limit,
        });
    }
    Ok(())
}

/// Chooses `min(k, eligible)` unprotected positions uniformly without
/// replacement.
pub fn sample_mask(
    seq_len: usize,
    p: &ConstraintParams,
    seed: u64,
) -> Result<BTreeSet<usize>, SimError> {
    let eligible: Vec<usize> = (0..seq_len)
        .filter(|t| !p.protected_positions.contains(t))
        .collect();
    if eligible.is_empty() {
        return Err(SimError::NoEligiblePositions(seq_len));
    }
    let mut rng = seed::rng(seed);
    let picks = index::sample(&mut rng, eligible.len(), p.k.min(eligible.len()));
    Ok(picks.into_iter().map(|i| eligible[i]).collect())
}

/// How a token is drawn from the perturbed distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    /// Sample from `softmax(logits + xi)`.
    Sample,
    /// Take the argmax of `logits + xi`.
    Greedy,
}

impl FromStr for Resampling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sample" => Ok(Resampling::Sample),
            "greedy" => Ok(Resampling::Greedy),
            other => Err(format!("unknown resampling mode {other:?}")),
        }
    }
}

impl fmt::Display for Resampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Resampling::Sample => "sample",
            Resampling::Greedy => "greedy",
        })
    }
}

/// Result of perturbing one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationOutcome {
    pub mask: BTreeSet<usize>,
    pub original_tokens: Vec<usize>,
    pub perturbed_tokens: Vec<usize>,
    /// Noise vector drawn at each masked position, in mask order.
    pub noise: Vec<Vec<f64>>,
}

impl PerturbationOutcome {
    pub fn flips(&self) -> usize {
        self.mask
            .iter()
            .filter(|&&t| self.original_tokens[t] != self.perturbed_tokens[t])
            .count()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical(p: &[f64], rng: &mut seed::Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the final partial sum.
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

/// Redraws the masked positions of the teacher's greedy sequence from
/// `softmax(row + xi)` and copies every other position unchanged.
pub fn perturb_and_resample(
    table: &LogitTable,
    mask: &BTreeSet<usize>,
    p: &ConstraintParams,
    seed: u64,
) -> Result<PerturbationOutcome, SimError> {
    perturb_and_resample_with(table, mask, p, Resampling::Sample, seed)
}

pub fn perturb_and_resample_with(
    table: &LogitTable,
    mask: &BTreeSet<usize>,
    p: &ConstraintParams,
    resampling: Resampling,
    seed: u64,
) -> Result<PerturbationOutcome, SimError> {
    validate_params(p)?;
    if mask.len() > p.k {
        return Err(SimError::MaskTooLarge {
            size: mask.len(),
            k: p.k,
        });
    }
    for &t in mask {
        if p.protected_positions.contains(&t) {
            return Err(SimError::ProtectedInMask(t));
        }
        if t >= table.len() {
            return Err(SimError::MaskOutOfRange {
                position: t,
                len: table.len(),
            });
        }
    }
    let original_tokens = table.greedy_tokens();
    let mut perturbed_tokens = original_tokens.clone();
    let std = p
        .noise_convention
        .coordinate_std(p.sigma2, table.vocab_size());
    let mut rng = seed::rng(seed);
    let mut noise = Vec::with_capacity(mask.len());
    for &t in mask {
        let xi: Vec<f64> = (0..table.vocab_size())
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                std * x
            })
            .collect();
        let logits: Vec<f64> = table.rows[t].iter().zip(&xi).map(|(a, b)| a + b).collect();
        perturbed_tokens[t] = match resampling {
            Resampling::Sample => sample_categorical(&softmax(&logits), &mut rng),
            Resampling::Greedy => argmax(&logits),
        };
        noise.push(xi);
    }
    Ok(PerturbationOutcome {
        mask: mask.clone(),
        original_tokens,
        perturbed_tokens,
        noise,
    })
}

/// Fraction of masked positions whose redrawn token differs from the
/// teacher's argmax token, over `trials` independent masks and noise draws.
pub fn token_flip_rate(
    table: &LogitTable,
    p: &ConstraintParams,
    resampling: Resampling,
    trials: usize,
    seed: u64,
) -> Result<f64, SimError> {
    validate_params(p)?;
    if trials == 0 {
        return Err(SimError::Table("trials must be at least 1".into()));
    }
    let counts: Vec<(usize, usize)> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let trial_seed = seed::derive(seed, trial);
            let mask = sample_mask(table.len(), p, seed::derive(trial_seed, 0))?;
            let outcome = perturb_and_resample_with(
                table,
                &mask,
                p,
                resampling,
                seed::derive(trial_seed, 1),
            )?;
            Ok((outcome.flips(), outcome.mask.len()))
        })
        .collect::<Result<_, SimError>>()?;
    let (flips, masked) = counts
        .into_iter()
        .fold((0, 0), |(f, m), (a, b)| (f + a, m + b));
    Ok(flips as f64 / masked as f64)
}
