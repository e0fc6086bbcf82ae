//! Leave-latest-out splits, capped histories, negative sampling and candidate
//! lists.
//!
//! Every random choice is driven by a ChaCha stream whose seed derives from
//! the master seed plus the instance's `(user_id, item_id)`, so instances can
//! be generated in any order (or in parallel) without changing the output.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{DomainDataset, Interaction, PairedCorpus};
use crate::text;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid split config: {0}")]
    Config(String),
    #[error("pair {0}: no user has two or more target interactions")]
    NoEligibleUsers(String),
    #[error("empty test pool")]
    EmptyPool,
    #[error("user {user}: only {available} unrated target items, need {needed}")]
    NotEnoughNegatives {
        user: String,
        available: usize,
        needed: usize,
    },
    #[error("duplicate title {0:?} among candidates")]
    DuplicateTitles(String),
    #[error("eval set {path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub test_size: usize,
    pub history_cap: usize,
    pub negatives_per_positive: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            test_size: 1000,
            history_cap: 10,
            negatives_per_positive: 20,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.test_size == 0 {
            return Err(SamplerError::Config("test_size must be >= 1".into()));
        }
        if self.history_cap == 0 {
            return Err(SamplerError::Config("history_cap must be >= 1".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(SamplerError::Config(
                "negatives_per_positive must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub title: String,
    pub rating: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Positive {
    pub item_id: String,
    pub title: String,
    pub rating: f64,
}

/// One evaluation case: a withheld target interaction, the user's capped
/// histories and a shuffled candidate list of the positive plus negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub pair_name: String,
    pub source_domain: String,
    pub target_domain: String,
    pub user_id: String,
    pub positive: Positive,
    /// Most recent first.
    pub source_history: Vec<HistoryEntry>,
    /// Most recent first.
    pub target_history: Vec<HistoryEntry>,
    pub negatives: Vec<Candidate>,
    pub candidates: Vec<Candidate>,
    /// Index of the positive in `candidates` after shuffling.
    pub positive_index: usize,
    pub seed_trace: u64,
}

impl EvalInstance {
    pub fn candidate_titles(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.title.as_str()).collect()
    }

    /// Checks the structural invariants, returning a description of the first
    /// violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let k = self.negatives.len();
        if self.candidates.len() != k + 1 {
            return Err(format!("{} candidates for {k} negatives", self.candidates.len()));
        }
        let pos = self
            .candidates
            .get(self.positive_index)
            .ok_or("positive_index out of range")?;
        if pos.item_id != self.positive.item_id || pos.title != self.positive.title {
            return Err("positive_index does not point at the positive".into());
        }
        if self
            .candidates
            .iter()
            .filter(|c| c.title == self.positive.title)
            .count()
            != 1
        {
            return Err("positive title not present exactly once".into());
        }
        let mut ids: HashSet<&str> = HashSet::new();
        for n in &self.negatives {
            if n.item_id == self.positive.item_id {
                return Err("positive among negatives".into());
            }
            if !ids.insert(&n.item_id) {
                return Err(format!("duplicate negative {}", n.item_id));
            }
        }
        let mut expected: Vec<&Candidate> = self.negatives.iter().collect();
        let positive = Candidate {
            item_id: self.positive.item_id.clone(),
            title: self.positive.title.clone(),
        };
        expected.push(&positive);
        let mut got: Vec<&Candidate> = self.candidates.iter().collect();
        expected.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        got.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        if expected != got {
            return Err("candidates are not a permutation of positive + negatives".into());
        }
        Ok(())
    }
}

/// Stable 64-bit seed derived from the master seed and the given labels.
pub fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: PairedCorpus,
    /// Withheld target interactions, ordered by user id.
    pub test_pool: Vec<Interaction>,
}

fn latest_first(a: &Interaction, b: &Interaction) -> std::cmp::Ordering {
    b.timestamp
        .cmp(&a.timestamp)
        .then_with(|| a.item_id.cmp(&b.item_id))
}

/// Withhold each eligible user's most recent target interaction. Users with a
/// single target interaction stay entirely in train.
pub fn split(pc: &PairedCorpus, cfg: &SplitConfig) -> Result<Split, SamplerError> {
    cfg.validate()?;
    let mut by_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    for it in &pc.target.interactions {
        by_user.entry(&it.user_id).or_default().push(it);
    }
    let mut withheld: HashSet<(&str, &str)> = HashSet::new();
    let mut test_pool = Vec::new();
    for (user, mut its) in by_user {
        if its.len() < 2 {
            continue;
        }
        its.sort_by(|a, b| latest_first(a, b));
        withheld.insert((user, &its[0].item_id));
        test_pool.push(its[0].clone());
    }
    if test_pool.is_empty() {
        return Err(SamplerError::NoEligibleUsers(pc.pair_name.clone()));
    }
    let mut train = pc.clone();
    train
        .target
        .interactions
        .retain(|i| !withheld.contains(&(i.user_id.as_str(), i.item_id.as_str())));
    Ok(Split { train, test_pool })
}

/// The `cap` most recent interactions of `user` in `ds`, skipping `exclude`.
/// Ties on timestamp are ordered by item id ascending.
pub fn select_history(
    ds: &DomainDataset,
    user: &str,
    cap: usize,
    exclude: Option<&str>,
) -> Vec<HistoryEntry> {
    let mut its: Vec<&Interaction> = ds
        .interactions
        .iter()
        .filter(|i| i.user_id == user && Some(i.item_id.as_str()) != exclude)
        .collect();
    its.sort_by(|a, b| latest_first(a, b));
    its.into_iter()
        .take(cap)
        .filter_map(|i| {
            ds.catalog.title(&i.item_id).map(|t| HistoryEntry {
                title: t.to_string(),
                rating: i.rating,
            })
        })
        .collect()
}

/// Draw `k` distinct items uniformly from `universe \ rated`.
pub fn sample_negatives(
    universe: &[Candidate],
    rated: &HashSet<&str>,
    user: &str,
    k: usize,
    seed: u64,
) -> Result<Vec<Candidate>, SamplerError> {
    let pool: Vec<&Candidate> = universe
        .iter()
        .filter(|c| !rated.contains(c.item_id.as_str()))
        .collect();
    if pool.len() < k {
        return Err(SamplerError::NotEnoughNegatives {
            user: user.to_string(),
            available: pool.len(),
            needed: k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

/// Shuffle `{positive} ∪ negatives`, returning the list and the positive's
/// index. Titles that collide after normalization are rejected.
pub fn build_candidates(
    positive: &Candidate,
    negatives: &[Candidate],
    seed: u64,
) -> Result<(Vec<Candidate>, usize), SamplerError> {
    let mut seen = HashSet::new();
    for c in std::iter::once(positive).chain(negatives) {
        if !seen.insert(text::normalize(&c.title)) {
            return Err(SamplerError::DuplicateTitles(c.title.clone()));
        }
    }
    let mut all: Vec<Candidate> = Vec::with_capacity(negatives.len() + 1);
    all.push(positive.clone());
    all.extend(negatives.iter().cloned());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    let idx = all
        .iter()
        .position(|c| c.item_id == positive.item_id)
        .expect("positive was inserted");
    Ok((all, idx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedInstance {
    pub user_id: String,
    pub item_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub instances: Vec<EvalInstance>,
    pub skipped: Vec<SkippedInstance>,
}

/// Sample up to `cfg.test_size` withheld interactions and expand each into a
/// full [`EvalInstance`]. Instances whose negatives cannot be drawn, or whose
/// candidates keep colliding on titles, are skipped and reported.
pub fn sample_eval_set(split: &Split, cfg: &SplitConfig) -> Result<EvalSet, SamplerError> {
    cfg.validate()?;
    if split.test_pool.is_empty() {
        return Err(SamplerError::EmptyPool);
    }
    let train = &split.train;
    let n = cfg.test_size.min(split.test_pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks = index::sample(&mut rng, split.test_pool.len(), n).into_vec();
    picks.sort_unstable();

    // Target item universe covers train and withheld interactions.
    let mut universe: BTreeMap<&str, &str> = BTreeMap::new();
    let mut rated: HashMap<&str, HashSet<&str>> = HashMap::new();
    for it in train.target.interactions.iter().chain(&split.test_pool) {
        if let Some(t) = train.target.catalog.title(&it.item_id) {
            universe.insert(&it.item_id, t);
        }
        rated.entry(&it.user_id).or_default().insert(&it.item_id);
    }
    let universe: Vec<Candidate> = universe
        .into_iter()
        .map(|(id, t)| Candidate {
            item_id: id.to_string(),
            title: t.to_string(),
        })
        .collect();

    let mut instances = Vec::with_capacity(n);
    let mut skipped = Vec::new();
    for idx in picks {
        let held = &split.test_pool[idx];
        match expand_instance(train, held, &universe, &rated, cfg) {
            Ok(inst) => instances.push(inst),
            Err(e) => {
                log::warn!("skipping {}/{}: {e}", held.user_id, held.item_id);
                skipped.push(SkippedInstance {
                    user_id: held.user_id.clone(),
                    item_id: held.item_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(EvalSet { instances, skipped })
}

fn expand_instance(
    train: &PairedCorpus,
    held: &Interaction,
    universe: &[Candidate],
    rated: &HashMap<&str, HashSet<&str>>,
    cfg: &SplitConfig,
) -> Result<EvalInstance, SamplerError> {
    let title = train
        .target
        .catalog
        .title(&held.item_id)
        .ok_or_else(|| SamplerError::Format {
            path: train.pair_name.clone(),
            message: format!("no title for withheld item {}", held.item_id),
        })?;
    let seed = derive_seed(cfg.seed, &[&held.user_id, &held.item_id]);
    let empty = HashSet::new();
    let user_rated = rated.get(held.user_id.as_str()).unwrap_or(&empty);
    let positive = Candidate {
        item_id: held.item_id.clone(),
        title: title.to_string(),
    };
    let k = cfg.negatives_per_positive;

    let mut negatives = sample_negatives(universe, user_rated, &held.user_id, k, seed)?;
    let (candidates, positive_index) = match build_candidates(&positive, &negatives, seed) {
        Ok(c) => c,
        Err(SamplerError::DuplicateTitles(_)) => {
            let retry = derive_seed(seed, &["resample"]);
            negatives = sample_negatives(universe, user_rated, &held.user_id, k, retry)?;
            build_candidates(&positive, &negatives, retry)?
        }
        Err(e) => return Err(e),
    };

    Ok(EvalInstance {
        pair_name: train.pair_name.clone(),
        source_domain: train.source.domain.clone(),
        target_domain: train.target.domain.clone(),
        user_id: held.user_id.clone(),
        positive: Positive {
            item_id: held.item_id.clone(),
            title: title.to_string(),
            rating: held.rating,
        },
        source_history: select_history(&train.source, &held.user_id, cfg.history_cap, None),
        target_history: select_history(
            &train.target,
            &held.user_id,
            cfg.history_cap,
            Some(&held.item_id),
        ),
        negatives,
        candidates,
        positive_index,
        seed_trace: seed,
    })
}

pub fn write_eval_set(instances: &[EvalInstance], path: &Path) -> Result<(), SamplerError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut out, inst).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_eval_set(path: &Path) -> Result<Vec<EvalInstance>, SamplerError> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: EvalInstance = serde_json::from_str(&line).map_err(|e| SamplerError::Format {
            path: path.display().to_string(),
            message: format!("line {}: {e}", n + 1),
        })?;
        out.push(inst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_pair, ItemCatalog};

    fn it(user: &str, item: &str, t: i64, domain: &str) -> Interaction {
        Interaction {
            user_id: user.into(),
            item_id: item.into(),
            rating: 4.0,
            timestamp: t,
            domain: domain.into(),
        }
    }

    fn dataset(domain: &str, its: Vec<Interaction>, n_items: usize) -> DomainDataset {
        let mut entries = BTreeMap::new();
        for i in 0..n_items {
            entries.insert(format!("{domain}{i}"), format!("{domain} title {i}"));
        }
        for i in &its {
            entries
                .entry(i.item_id.clone())
                .or_insert_with(|| format!("{} title", i.item_id));
        }
        DomainDataset {
            domain: domain.into(),
            interactions: its,
            catalog: ItemCatalog { entries },
        }
    }

    fn universe(n: usize) -> Vec<Candidate> {
        (1..=n)
            .map(|i| Candidate {
                item_id: format!("i{i}"),
                title: format!("Title {i}"),
            })
            .collect()
    }

    #[test]
    fn leave_latest_out() {
        let src = dataset("S", vec![it("u", "S0", 1, "S"), it("v", "S1", 1, "S")], 2);
        let tgt = dataset(
            "T",
            vec![
                it("u", "T1", 1, "T"),
                it("u", "T2", 2, "T"),
                it("u", "T3", 3, "T"),
                it("v", "T1", 5, "T"),
            ],
            0,
        );
        let pc = build_pair(&src, &tgt, "p").unwrap();
        let s = split(&pc, &SplitConfig::default()).unwrap();
        assert_eq!(s.test_pool.len(), 1);
        assert_eq!(s.test_pool[0].item_id, "T3");
        let u_train: Vec<_> = s
            .train
            .target
            .interactions
            .iter()
            .filter(|i| i.user_id == "u")
            .map(|i| i.item_id.as_str())
            .collect();
        assert_eq!(u_train, ["T1", "T2"]);
        // v has one target interaction and stays in train.
        assert!(s.train.target.interactions.iter().any(|i| i.user_id == "v"));
        assert_eq!(split(&pc, &SplitConfig::default()).unwrap(), s);
    }

    #[test]
    fn no_eligible_users_is_fatal() {
        let src = dataset("S", vec![it("u", "S0", 1, "S")], 1);
        let tgt = dataset("T", vec![it("u", "T0", 1, "T")], 1);
        let pc = build_pair(&src, &tgt, "p").unwrap();
        assert!(matches!(
            split(&pc, &SplitConfig::default()),
            Err(SamplerError::NoEligibleUsers(_))
        ));
    }

    #[test]
    fn history_cap_and_order() {
        let its: Vec<_> = (0..15).map(|t| it("u", &format!("b{t:02}"), t, "B")).collect();
        let ds = dataset("B", its, 0);
        let h = select_history(&ds, "u", 10, None);
        assert_eq!(h.len(), 10);
        assert_eq!(h[0].title, "b14 title");
        assert_eq!(h[9].title, "b05 title");

        let few: Vec<_> = (0..4).map(|t| it("u", &format!("b{t}"), t, "B")).collect();
        assert_eq!(select_history(&dataset("B", few, 0), "u", 10, None).len(), 4);
    }

    #[test]
    fn history_ties_break_by_item_id() {
        let ds = dataset("B", vec![it("u", "zz", 5, "B"), it("u", "aa", 5, "B")], 0);
        let h = select_history(&ds, "u", 10, None);
        assert_eq!(h[0].title, "aa title");
        assert_eq!(h[1].title, "zz title");
        let excl = select_history(&ds, "u", 10, Some("aa"));
        assert_eq!(excl.len(), 1);
    }

    #[test]
    fn negatives_avoid_rated_items() {
        let u = universe(30);
        let rated: HashSet<&str> = ["i1", "i2", "i3", "i4", "i5"].into_iter().collect();
        let neg = sample_negatives(&u, &rated, "u", 20, 7).unwrap();
        assert_eq!(neg.len(), 20);
        let ids: HashSet<_> = neg.iter().map(|c| c.item_id.as_str()).collect();
        assert_eq!(ids.len(), 20);
        assert!(ids.is_disjoint(&rated));
        assert_eq!(sample_negatives(&u, &rated, "u", 20, 7).unwrap(), neg);
    }

    #[test]
    fn negatives_forced_when_exactly_enough() {
        let u = universe(21);
        let rated: HashSet<&str> = ["i1"].into_iter().collect();
        let mut ids: Vec<_> = sample_negatives(&u, &rated, "u", 20, 1)
            .unwrap()
            .into_iter()
            .map(|c| c.item_id)
            .collect();
        ids.sort();
        let mut expected: Vec<_> = (2..=21).map(|i| format!("i{i}")).collect();
        expected.sort();
        assert_eq!(ids, expected);
        assert!(matches!(
            sample_negatives(&u, &rated, "u", 21, 1),
            Err(SamplerError::NotEnoughNegatives { available: 20, .. })
        ));
    }

    #[test]
    fn candidates_contain_positive_once() {
        let u = universe(21);
        let (pos, neg) = (u[0].clone(), u[1..].to_vec());
        let (c, idx) = build_candidates(&pos, &neg, 3).unwrap();
        assert_eq!(c.len(), 21);
        assert_eq!(c[idx], pos);
        assert_eq!(c.iter().filter(|x| **x == pos).count(), 1);
        assert_eq!(build_candidates(&pos, &neg, 3).unwrap(), (c, idx));
    }

    #[test]
    fn zero_negatives_is_singleton() {
        let pos = universe(1).remove(0);
        let (c, idx) = build_candidates(&pos, &[], 9).unwrap();
        assert_eq!(c, vec![pos]);
        assert_eq!(idx, 0);
    }

    #[test]
    fn duplicate_titles_rejected() {
        let pos = Candidate { item_id: "a".into(), title: "Inferno".into() };
        let neg = vec![Candidate { item_id: "b".into(), title: "inferno".into() }];
        assert!(matches!(
            build_candidates(&pos, &neg, 1),
            Err(SamplerError::DuplicateTitles(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SplitConfig::default();
        assert_eq!((cfg.test_size, cfg.history_cap, cfg.negatives_per_positive), (1000, 10, 20));
        cfg.history_cap = 0;
        assert!(cfg.validate().is_err());
    }

    fn synthetic_pair(users: usize) -> PairedCorpus {
        let mut s = Vec::new();
        let mut t = Vec::new();
        for u in 0..users {
            for j in 0..(3 + u % 5) {
                s.push(it(&format!("u{u}"), &format!("S{}", (u * 7 + j) % 40), j as i64, "S"));
            }
            for j in 0..(2 + u % 4) {
                t.push(it(&format!("u{u}"), &format!("T{}", (u * 3 + j * 11) % 60), (10 + j) as i64, "T"));
            }
        }
        build_pair(&dataset("S", s, 40), &dataset("T", t, 60), "synthetic").unwrap()
    }

    #[test]
    fn pool_smaller_than_test_size_is_clamped() {
        let pc = synthetic_pair(5);
        let s = split(&pc, &SplitConfig::default()).unwrap();
        let set = sample_eval_set(&s, &SplitConfig::default()).unwrap();
        assert_eq!(set.instances.len() + set.skipped.len(), 5);
    }

    #[test]
    fn eval_set_is_deterministic_and_valid() {
        let pc = synthetic_pair(300);
        let cfg = SplitConfig { test_size: 100, ..Default::default() };
        let s = split(&pc, &cfg).unwrap();
        let a = sample_eval_set(&s, &cfg).unwrap();
        let b = sample_eval_set(&s, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.instances.len() + a.skipped.len(), 100);
        for inst in &a.instances {
            inst.check_invariants().unwrap();
            assert!(inst.source_history.len() <= cfg.history_cap);
            assert!(inst.target_history.iter().all(|h| h.title != inst.positive.title));
        }
        let f = tempfile::NamedTempFile::new().unwrap();
        write_eval_set(&a.instances, f.path()).unwrap();
        assert_eq!(read_eval_set(f.path()).unwrap(), a.instances);
    }
}
