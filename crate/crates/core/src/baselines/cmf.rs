use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mf::{rows_mut, sgd_step, FactorTable, MfParams};
use super::{clamp_rating, dot, TrainError};
use crate::corpus::Interaction;

/// Collective MF: one user vector shared by both domains, one item table per
/// domain, and a per-domain global mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmfModel {
    pub params: MfParams,
    pub users: FactorTable,
    pub source_items: FactorTable,
    pub target_items: FactorTable,
    pub source_mean: f64,
    pub target_mean: f64,
    pub loss_curve: Vec<f64>,
}

impl CmfModel {
    pub fn raw_score_target(&self, user: &str, item: &str) -> Option<f64> {
        Some(self.target_mean + dot(self.users.get(user)?, self.target_items.get(item)?))
    }

    pub fn raw_score_source(&self, user: &str, item: &str) -> Option<f64> {
        Some(self.source_mean + dot(self.users.get(user)?, self.source_items.get(item)?))
    }

    pub fn predict_target(&self, user: &str, item: &str) -> f64 {
        clamp_rating(self.raw_score_target(user, item).unwrap_or(self.target_mean))
    }
}

fn mean(xs: &[Interaction]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().map(|i| i.rating).sum::<f64>() / xs.len() as f64
    }
}

/// One SGD stream over the shuffled union of both domains' ratings.
pub fn train_cmf(source: &[Interaction], target: &[Interaction], params: &MfParams) -> Result<CmfModel, TrainError> {
    if target.is_empty() && source.is_empty() {
        return Err(TrainError::Empty);
    }
    params.validate()?;
    if !source.is_empty() && !target.is_empty() {
        let su: BTreeSet<&str> = source.iter().map(|i| i.user_id.as_str()).collect();
        if !target.iter().any(|i| su.contains(i.user_id.as_str())) {
            return Err(TrainError::NoSharedUsers);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let users = FactorTable::init(
        source.iter().chain(target).map(|i| i.user_id.as_str()),
        params.dim,
        &mut rng,
    );
    let source_items = FactorTable::init(source.iter().map(|i| i.item_id.as_str()), params.dim, &mut rng);
    let target_items = FactorTable::init(target.iter().map(|i| i.item_id.as_str()), params.dim, &mut rng);

    // (is_target, user, item, rating)
    let mut data: Vec<(bool, usize, usize, f64)> = source
        .iter()
        .map(|i| (false, users.index[&i.user_id], source_items.index[&i.item_id], i.rating))
        .chain(
            target
                .iter()
                .map(|i| (true, users.index[&i.user_id], target_items.index[&i.item_id], i.rating)),
        )
        .collect();

    let mut model = CmfModel {
        params: *params,
        users,
        source_items,
        target_items,
        source_mean: mean(source),
        target_mean: mean(target),
        loss_curve: Vec::with_capacity(params.epochs),
    };
    // one shuffle up front; a fixed visiting order keeps the per-epoch loss
    // from jittering once SGD settles
    data.shuffle(&mut rng);
    for epoch in 0..params.epochs {
        for &(is_target, u, i, r) in &data {
            let (items, mu) = if is_target {
                (&mut model.target_items, model.target_mean)
            } else {
                (&mut model.source_items, model.source_mean)
            };
            let (p, q) = rows_mut(&mut model.users, items, u, i);
            sgd_step(p, q, r, mu, params.lr, params.reg);
        }
        let loss: f64 = data
            .iter()
            .map(|&(is_target, u, i, r)| {
                let (items, mu) = if is_target {
                    (&model.target_items, model.target_mean)
                } else {
                    (&model.source_items, model.source_mean)
                };
                let e = r - mu - dot(model.users.row(u), items.row(i));
                e * e + params.reg * (model.users.sq_norm(u) + items.sq_norm(i))
            })
            .sum();
        if !loss.is_finite() {
            return Err(TrainError::Diverged { epoch, lr: params.lr });
        }
        log::debug!("cmf epoch {epoch}: loss {loss:.6}");
        model.loss_curve.push(loss);
    }
    Ok(model)
}
