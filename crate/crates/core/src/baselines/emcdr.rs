use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mf::MfModel;
use super::{clamp_rating, dot, TrainError};

pub const MIN_OVERLAP_USERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct MapperParams {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MapperParams {
    fn default() -> Self {
        Self {
            hidden: 32,
            lr: 0.01,
            epochs: 30,
            seed: 42,
        }
    }
}

/// `f(x) = W2 · tanh(W1 · x + b1) + b2`, mapping source-domain user vectors
/// into the target domain. Weight matrices are row-major: `w1` is
/// `hidden × dim`, `w2` is `dim × hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpMapper {
    pub dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub loss_curve: Vec<f64>,
}

/// Gradients with the same layout as the mapper's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpMapper {
    /// Xavier-uniform weights, zero biases.
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (dim + hidden) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..=bound)).collect() };
        let w1 = draw(hidden * dim);
        let w2 = draw(dim * hidden);
        Self {
            dim,
            hidden,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; dim],
            loss_curve: Vec::new(),
        }
    }

    fn hidden_act(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|j| (dot(&self.w1[j * self.dim..(j + 1) * self.dim], x) + self.b1[j]).tanh())
            .collect()
    }

    fn output(&self, a: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| dot(&self.w2[i * self.hidden..(i + 1) * self.hidden], a) + self.b2[i])
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.output(&self.hidden_act(x))
    }

    /// Squared error `‖f(x) − y‖²`.
    pub fn loss(&self, x: &[f64], y: &[f64]) -> f64 {
        self.forward(x).iter().zip(y).map(|(f, t)| (f - t).powi(2)).sum()
    }

    /// Backpropagated gradient of [`MlpMapper::loss`].
    pub fn gradients(&self, x: &[f64], y: &[f64]) -> MlpGrads {
        let (d, h) = (self.dim, self.hidden);
        let a = self.hidden_act(x);
        let out = self.output(&a);
        let g_out: Vec<f64> = out.iter().zip(y).map(|(f, t)| 2.0 * (f - t)).collect();

        let mut w2 = vec![0.0; d * h];
        for i in 0..d {
            for j in 0..h {
                w2[i * h + j] = g_out[i] * a[j];
            }
        }
        let g_z: Vec<f64> = (0..h)
            .map(|j| {
                let g_a: f64 = (0..d).map(|i| self.w2[i * h + j] * g_out[i]).sum();
                g_a * (1.0 - a[j] * a[j])
            })
            .collect();
        let mut w1 = vec![0.0; h * d];
        for j in 0..h {
            for k in 0..d {
                w1[j * d + k] = g_z[j] * x[k];
            }
        }
        MlpGrads {
            w1,
            b1: g_z,
            w2,
            b2: g_out,
        }
    }

    fn apply(&mut self, g: &MlpGrads, lr: f64) {
        for (p, gp) in [
            (&mut self.w1, &g.w1),
            (&mut self.b1, &g.b1),
            (&mut self.w2, &g.w2),
            (&mut self.b2, &g.b2),
        ] {
            for (v, dv) in p.iter_mut().zip(gp) {
                *v -= lr * dv;
            }
        }
    }

    /// Mutable access to the four parameter tensors, in `w1, b1, w2, b2` order.
    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn all_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Fit the mapper on `(x, y)` pairs by per-example SGD.
pub fn fit_mapper(pairs: &[(Vec<f64>, Vec<f64>)], dim: usize, params: &MapperParams) -> Result<MlpMapper, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::Empty);
    }
    if params.hidden == 0 || !(params.lr > 0.0) {
        return Err(TrainError::Params(format!("{params:?}")));
    }
    let mut mapper = MlpMapper::new(dim, params.hidden, params.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    // one shuffle up front; a fixed visiting order keeps the per-epoch loss
    // from jittering once SGD settles
    order.shuffle(&mut rng);
    for epoch in 0..params.epochs {
        for &n in &order {
            let (x, y) = &pairs[n];
            let g = mapper.gradients(x, y);
            mapper.apply(&g, params.lr);
        }
        let loss: f64 = pairs.iter().map(|(x, y)| mapper.loss(x, y)).sum();
        if !loss.is_finite() || !mapper.all_finite() {
            return Err(TrainError::Diverged { epoch, lr: params.lr });
        }
        mapper.loss_curve.push(loss);
    }
    Ok(mapper)
}

/// Train the bridge from `source_mf` user vectors to `target_mf` user vectors
/// over users present in both models.
pub fn train_emcdr(
    source_mf: &MfModel,
    target_mf: &MfModel,
    overlap_users: &BTreeSet<String>,
    params: &MapperParams,
) -> Result<MlpMapper, TrainError> {
    if source_mf.dim() != target_mf.dim() {
        return Err(TrainError::Params(format!(
            "dimension mismatch: source {} vs target {}",
            source_mf.dim(),
            target_mf.dim()
        )));
    }
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = overlap_users
        .iter()
        .filter_map(|u| Some((source_mf.users.get(u)?.to_vec(), target_mf.users.get(u)?.to_vec())))
        .collect();
    if pairs.len() < MIN_OVERLAP_USERS {
        return Err(TrainError::TooFewOverlapUsers(pairs.len()));
    }
    fit_mapper(&pairs, source_mf.dim(), params)
}

/// `mu_target + f(p_source)·q_target`, clamped. Falls back to the target mean
/// when the user has no source vector or the item is unknown.
pub fn predict_emcdr(mapper: &MlpMapper, source_mf: &MfModel, target_mf: &MfModel, user: &str, item: &str) -> f64 {
    clamp_rating(emcdr_raw_score(mapper, source_mf, target_mf, user, item).unwrap_or(target_mf.global_mean))
}

/// Unclamped bridge score, or `None` when either embedding is missing.
pub fn emcdr_raw_score(mapper: &MlpMapper, source_mf: &MfModel, target_mf: &MfModel, user: &str, item: &str) -> Option<f64> {
    let (p, q) = (source_mf.users.get(user)?, target_mf.items.get(item)?);
    Some(target_mf.global_mean + dot(&mapper.forward(p), q))
}
