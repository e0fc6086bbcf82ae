//! Classical comparators trained in-repo: target-only MF (TGT), collective MF
//! (CMF) and an EMCDR-style MLP bridge between per-domain MF embeddings.

mod cmf;
mod emcdr;
mod mf;

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub use cmf::{train_cmf, CmfModel};
pub use emcdr::{emcdr_raw_score, fit_mapper, predict_emcdr, train_emcdr, MapperParams, MlpGrads, MlpMapper, MIN_OVERLAP_USERS};
pub use mf::{train_mf, FactorTable, MfModel, MfParams};

use crate::corpus::{MAX_RATING, MIN_RATING};
use crate::metrics::RankingOutcome;
use crate::sampler::EvalInstance;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training data")]
    Empty,
    #[error("training diverged at epoch {epoch} (lr {lr}); try a smaller learning rate")]
    Diverged { epoch: usize, lr: f64 },
    #[error("invalid hyperparameters: {0}")]
    Params(String),
    #[error("source and target share no users")]
    NoSharedUsers,
    #[error("need at least {MIN_OVERLAP_USERS} overlapping users with embeddings, got {0}")]
    TooFewOverlapUsers(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn clamp_rating(r: f64) -> f64 {
    r.clamp(MIN_RATING, MAX_RATING)
}

/// Anything that can score a (user, item) pair in the target domain.
pub trait Scorer {
    fn score(&self, user: &str, item: &str) -> f64;

    /// Score used to order candidates; defaults to [`Scorer::score`]. The
    /// trained models override it with their unclamped score so that
    /// predictions beyond the rating range still separate.
    fn rank_score(&self, user: &str, item: &str) -> f64 {
        self.score(user, item)
    }
}

impl Scorer for MfModel {
    fn score(&self, user: &str, item: &str) -> f64 {
        self.predict(user, item)
    }

    fn rank_score(&self, user: &str, item: &str) -> f64 {
        self.raw_score(user, item).unwrap_or(self.global_mean)
    }
}

impl Scorer for CmfModel {
    fn score(&self, user: &str, item: &str) -> f64 {
        self.predict_target(user, item)
    }

    fn rank_score(&self, user: &str, item: &str) -> f64 {
        self.raw_score_target(user, item).unwrap_or(self.target_mean)
    }
}

/// EMCDR predictor: the bridge plus both domain models.
#[derive(Debug, Clone)]
pub struct Emcdr {
    pub mapper: MlpMapper,
    pub source: MfModel,
    pub target: MfModel,
}

impl Scorer for Emcdr {
    fn score(&self, user: &str, item: &str) -> f64 {
        predict_emcdr(&self.mapper, &self.source, &self.target, user, item)
    }

    fn rank_score(&self, user: &str, item: &str) -> f64 {
        emcdr_raw_score(&self.mapper, &self.source, &self.target, user, item)
            .unwrap_or(self.target.global_mean)
    }
}

impl<F: Fn(&str, &str) -> f64> Scorer for F {
    fn score(&self, user: &str, item: &str) -> f64 {
        self(user, item)
    }
}

/// Rank the candidates by descending score, ties kept in candidate order,
/// and report the positive's 1-based position.
pub fn rank_with_model<S: Scorer + ?Sized>(scorer: &S, instance: &EvalInstance) -> RankingOutcome {
    let scores: Vec<f64> = instance
        .candidates
        .iter()
        .map(|c| scorer.rank_score(&instance.user_id, &c.item_id))
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let p_u = order
        .iter()
        .position(|&i| i == instance.positive_index)
        .expect("positive is a candidate")
        + 1;
    RankingOutcome {
        p_u,
        k_total: scores.len(),
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CDRBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write a model as `magic | version (u32 LE) | bincode payload`.
pub fn save_checkpoint<T: Serialize>(model: &T, path: &Path) -> Result<(), TrainError> {
    let payload = bincode::serialize(model).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let mut f = fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path) -> Result<T, TrainError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
    }
    bincode::deserialize(&bytes[12..]).map_err(|e| TrainError::Checkpoint(e.to_string()))
}
