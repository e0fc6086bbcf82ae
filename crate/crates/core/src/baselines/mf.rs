use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clamp_rating, dot, TrainError};
use crate::corpus::Interaction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct MfParams {
    pub dim: usize,
    pub reg: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MfParams {
    fn default() -> Self {
        Self {
            dim: 10,
            reg: 0.01,
            lr: 0.01,
            epochs: 30,
            seed: 42,
        }
    }
}

/// Dense row-major factor table keyed by external id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTable {
    pub index: BTreeMap<String, usize>,
    pub values: Vec<f64>,
    pub dim: usize,
}

impl FactorTable {
    pub(crate) fn init<'a>(ids: impl Iterator<Item = &'a str>, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let index: BTreeMap<String, usize> = ids
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id.to_string(), i))
            .collect();
        let values = (0..index.len() * dim).map(|_| rng.gen_range(-0.05..=0.05)).collect();
        Self { index, values, dim }
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub(crate) fn sq_norm(&self, i: usize) -> f64 {
        self.row(i).iter().map(|v| v * v).sum()
    }

    pub(crate) fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// One SGD step on `r ≈ mu + p·q` with L2 penalty, updating both rows in place.
pub(crate) fn sgd_step(p: &mut [f64], q: &mut [f64], r: f64, mu: f64, lr: f64, reg: f64) {
    let err = r - mu - dot(p, q);
    for k in 0..p.len() {
        let (pk, qk) = (p[k], q[k]);
        p[k] += lr * (err * qk - reg * pk);
        q[k] += lr * (err * pk - reg * qk);
    }
}

pub(crate) fn rows_mut<'a>(users: &'a mut FactorTable, items: &'a mut FactorTable, u: usize, i: usize) -> (&'a mut [f64], &'a mut [f64]) {
    let d = users.dim;
    (
        &mut users.values[u * d..(u + 1) * d],
        &mut items.values[i * d..(i + 1) * d],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfModel {
    pub params: MfParams,
    pub global_mean: f64,
    pub users: FactorTable,
    pub items: FactorTable,
    /// Full objective after each epoch.
    pub loss_curve: Vec<f64>,
}

impl MfModel {
    pub fn dim(&self) -> usize {
        self.params.dim
    }

    /// `mu + p·q` without clamping, or `None` for unknown ids.
    pub fn raw_score(&self, user: &str, item: &str) -> Option<f64> {
        Some(self.global_mean + dot(self.users.get(user)?, self.items.get(item)?))
    }

    /// Clamped prediction; unknown users or items fall back to the global mean.
    pub fn predict(&self, user: &str, item: &str) -> f64 {
        clamp_rating(self.raw_score(user, item).unwrap_or(self.global_mean))
    }

    fn objective(&self, data: &[(usize, usize, f64)]) -> f64 {
        data.iter()
            .map(|&(u, i, r)| {
                let e = r - self.global_mean - dot(self.users.row(u), self.items.row(i));
                e * e + self.params.reg * (self.users.sq_norm(u) + self.items.sq_norm(i))
            })
            .sum()
    }
}

/// Target-only matrix factorization by per-example SGD.
pub fn train_mf(interactions: &[Interaction], params: &MfParams) -> Result<MfModel, TrainError> {
    if interactions.is_empty() {
        return Err(TrainError::Empty);
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let users = FactorTable::init(interactions.iter().map(|i| i.user_id.as_str()), params.dim, &mut rng);
    let items = FactorTable::init(interactions.iter().map(|i| i.item_id.as_str()), params.dim, &mut rng);
    let global_mean = interactions.iter().map(|i| i.rating).sum::<f64>() / interactions.len() as f64;
    let mut data: Vec<(usize, usize, f64)> = interactions
        .iter()
        .map(|i| (users.index[&i.user_id], items.index[&i.item_id], i.rating))
        .collect();

    let mut model = MfModel {
        params: *params,
        global_mean,
        users,
        items,
        loss_curve: Vec::with_capacity(params.epochs),
    };
    // one shuffle up front; a fixed visiting order keeps the per-epoch loss
    // from jittering once SGD settles
    data.shuffle(&mut rng);
    for epoch in 0..params.epochs {
        for &(u, i, r) in &data {
            let (p, q) = rows_mut(&mut model.users, &mut model.items, u, i);
            sgd_step(p, q, r, global_mean, params.lr, params.reg);
        }
        let loss = model.objective(&data);
        if !loss.is_finite() || !model.users.all_finite() || !model.items.all_finite() {
            return Err(TrainError::Diverged { epoch, lr: params.lr });
        }
        log::debug!("mf epoch {epoch}: loss {loss:.6}");
        model.loss_curve.push(loss);
    }
    Ok(model)
}

impl MfParams {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.dim == 0 || !(self.lr > 0.0) || !(self.reg >= 0.0) {
            return Err(TrainError::Params(format!("{self:?}")));
        }
        Ok(())
    }
}
