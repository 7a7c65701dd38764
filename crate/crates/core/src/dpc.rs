//! Density-peaks token scoring and pruning.
//!
//! Every token gets a local density `rho` (exponential of the negative mean
//! squared distance to its `k` nearest neighbours, scaled by a temperature)
//! and a separation `delta` (distance to the nearest strictly denser token,
//! or, for the densest token, the largest distance to any token). Tokens
//! with the highest `rho * delta` are cluster centres and survive pruning.
//!
//! Ties are resolved by index throughout: equal densities treat the lower
//! index as denser, and equal scores prefer the lower index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{add_macs, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpcConfig {
    /// Neighbour count for the density estimate.
    pub k: usize,
    /// Temperature; `None` means the token dimensionality.
    #[serde(default)]
    pub tau: Option<f64>,
    /// Pruning ratio: `max(1, N / epsilon)` tokens are kept.
    pub epsilon: usize,
}

impl Default for DpcConfig {
    fn default() -> Self {
        Self {
            k: 5,
            tau: None,
            epsilon: 6,
        }
    }
}

impl DpcConfig {
    pub fn with_epsilon(epsilon: usize) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Argument("dpc: k must be >= 1".into()));
        }
        if self.epsilon == 0 {
            return Err(Error::Argument("dpc: epsilon must be >= 1".into()));
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Argument(format!("dpc: tau must be > 0, got {tau}")));
            }
        }
        Ok(())
    }

    pub fn resolved_tau(&self, dim: usize) -> f64 {
        self.tau.unwrap_or(dim as f64)
    }

    pub fn keep_count(&self, n: usize) -> usize {
        keep_count(n, self.epsilon)
    }
}

/// `max(1, n / epsilon)`.
pub fn keep_count(n: usize, epsilon: usize) -> usize {
    (n / epsilon).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpcScores {
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub score: Vec<f64>,
}

/// Retained token indices, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneSelection {
    pub kept: Vec<usize>,
    pub epsilon: usize,
}

impl PruneSelection {
    /// Keeps every one of `n` tokens.
    pub fn all(n: usize) -> Self {
        Self {
            kept: (0..n).collect(),
            epsilon: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

fn expect_tokens(tokens: &Tensor) -> Result<(usize, usize)> {
    match tokens.shape() {
        &[n, c] => Ok((n, c)),
        other => Err(Error::shape("dpc", other, &[0, 0])),
    }
}

/// Symmetric `N×N` matrix of squared Euclidean distances between rows.
pub fn pairwise_sq_dist(tokens: &Tensor) -> Result<Tensor> {
    let (n, c) = expect_tokens(tokens)?;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let xi = tokens.row(i);
        for j in i + 1..n {
            let d: f64 = xi
                .iter()
                .zip(tokens.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    add_macs((n * n.saturating_sub(1) / 2 * c) as u64);
    Tensor::new(vec![n, n], out)
}

fn density_from_dist(dist: &Tensor, k: usize, tau: f64) -> Vec<f64> {
    let n = dist.rows();
    let k = k.min(n - 1);
    let mut scratch = Vec::with_capacity(n);
    (0..n)
        .map(|i| {
            if k == 0 {
                return 1.0;
            }
            scratch.clear();
            scratch.extend(dist.row(i).iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d));
            scratch.select_nth_unstable_by(k - 1, f64::total_cmp);
            let nearest = &mut scratch[..k];
            nearest.sort_unstable_by(f64::total_cmp);
            let mean = nearest.iter().sum::<f64>() / k as f64;
            (-mean / tau).exp()
        })
        .collect()
}

/// `true` when token `j` counts as denser than token `i`.
fn denser(rho: &[f64], j: usize, i: usize) -> bool {
    match rho[j].partial_cmp(&rho[i]) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Equal) => j < i,
        _ => false,
    }
}

fn delta_from_dist(dist: &Tensor, rho: &[f64]) -> Vec<f64> {
    let n = dist.rows();
    (0..n)
        .map(|i| {
            let row = dist.row(i);
            let mut nearest_denser = f64::INFINITY;
            let mut farthest = 0.0f64;
            for j in (0..n).filter(|&j| j != i) {
                farthest = farthest.max(row[j]);
                if denser(rho, j, i) {
                    nearest_denser = nearest_denser.min(row[j]);
                }
            }
            if nearest_denser.is_finite() {
                nearest_denser.sqrt()
            } else {
                farthest.sqrt()
            }
        })
        .collect()
}

/// Local density of every token. The neighbourhood excludes the token itself
/// and holds `min(k, N - 1)` tokens; a lone token has density 1.
pub fn local_density(tokens: &Tensor, cfg: &DpcConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (_, c) = expect_tokens(tokens)?;
    let dist = pairwise_sq_dist(tokens)?;
    Ok(density_from_dist(&dist, cfg.k, cfg.resolved_tau(c)))
}

/// Separation of every token from the nearest denser one (Euclidean, not
/// squared).
pub fn delta_distance(tokens: &Tensor, rho: &[f64]) -> Result<Vec<f64>> {
    let (n, _) = expect_tokens(tokens)?;
    if rho.len() != n {
        return Err(Error::shape("delta_distance", &[n], &[rho.len()]));
    }
    let dist = pairwise_sq_dist(tokens)?;
    Ok(delta_from_dist(&dist, rho))
}

/// Scores all tokens and keeps the `max(1, N / epsilon)` best, returned in
/// original order.
pub fn prune(tokens: &Tensor, cfg: &DpcConfig) -> Result<(DpcScores, PruneSelection)> {
    cfg.validate()?;
    let (n, c) = expect_tokens(tokens)?;
    let dist = pairwise_sq_dist(tokens)?;
    let rho = density_from_dist(&dist, cfg.k, cfg.resolved_tau(c));
    let delta = delta_from_dist(&dist, &rho);
    let score: Vec<f64> = rho.iter().zip(&delta).map(|(r, d)| r * d).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut kept = order[..cfg.keep_count(n)].to_vec();
    kept.sort_unstable();

    Ok((
        DpcScores { rho, delta, score },
        PruneSelection {
            kept,
            epsilon: cfg.epsilon,
        },
    ))
}

/// Selection used inside the model: `epsilon == 1` keeps everything without
/// scoring.
pub fn select(tokens: &Tensor, cfg: &DpcConfig) -> Result<PruneSelection> {
    cfg.validate()?;
    if cfg.epsilon == 1 {
        return Ok(PruneSelection::all(tokens.rows()));
    }
    Ok(prune(tokens, cfg)?.1)
}
