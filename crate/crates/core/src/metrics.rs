//! Rating error (RMSE, MAE) and single-positive ranking metrics (MRR@k,
//! NDCG@k).
//!
//! Ranks past the cutoff contribute zero gain but stay in the denominator.
//! NDCG uses `ln 2 / ln(p + 1)`; the log base cancels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CUTOFF: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric undefined over an empty outcome list")]
    Empty,
    #[error("nothing to aggregate: both outcome lists are empty")]
    NothingToAggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingOutcome {
    pub y: f64,
    pub y_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingOutcome {
    /// 1-based rank of the positive.
    pub p_u: usize,
    pub k_total: usize,
}

pub fn rmse(outcomes: &[RatingOutcome]) -> Result<f64, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    let sse: f64 = outcomes.iter().map(|o| (o.y - o.y_hat).powi(2)).sum();
    Ok((sse / outcomes.len() as f64).sqrt())
}

pub fn mae(outcomes: &[RatingOutcome]) -> Result<f64, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    let sae: f64 = outcomes.iter().map(|o| (o.y - o.y_hat).abs()).sum();
    Ok(sae / outcomes.len() as f64)
}

pub fn reciprocal_rank(p_u: usize, k: usize) -> f64 {
    if p_u >= 1 && p_u <= k {
        1.0 / p_u as f64
    } else {
        0.0
    }
}

pub fn ndcg_gain(p_u: usize, k: usize) -> f64 {
    if p_u >= 1 && p_u <= k {
        std::f64::consts::LN_2 / ((p_u + 1) as f64).ln()
    } else {
        0.0
    }
}

pub fn mrr_at_k(outcomes: &[RankingOutcome], k: usize) -> Result<f64, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    let s: f64 = outcomes.iter().map(|o| reciprocal_rank(o.p_u, k)).sum();
    Ok(s / outcomes.len() as f64)
}

pub fn ndcg_at_k(outcomes: &[RankingOutcome], k: usize) -> Result<f64, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    let s: f64 = outcomes.iter().map(|o| ndcg_gain(o.p_u, k)).sum();
    Ok(s / outcomes.len() as f64)
}

/// Aggregated metrics for one cell. Fields for an absent task stay `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_evaluated: usize,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub mrr_at_10: Option<f64>,
    pub ndcg_at_10: Option<f64>,
    pub parse_failures: usize,
    pub parse_failure_rate: f64,
}

/// `failures` counts instances excluded from the metrics because their
/// responses could not be parsed.
pub fn aggregate(
    ratings: &[RatingOutcome],
    rankings: &[RankingOutcome],
    failures: usize,
) -> Result<MetricsReport, MetricError> {
    if ratings.is_empty() && rankings.is_empty() {
        return Err(MetricError::NothingToAggregate);
    }
    let n_evaluated = ratings.len().max(rankings.len());
    let opt = |r: Result<f64, MetricError>| r.ok();
    Ok(MetricsReport {
        n_evaluated,
        rmse: opt(rmse(ratings)),
        mae: opt(mae(ratings)),
        mrr_at_10: opt(mrr_at_k(rankings, DEFAULT_CUTOFF)),
        ndcg_at_10: opt(ndcg_at_k(rankings, DEFAULT_CUTOFF)),
        parse_failures: failures,
        parse_failure_rate: failures as f64 / (n_evaluated + failures) as f64,
    })
}
