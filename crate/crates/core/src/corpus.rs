//! Review ingestion, title joins and overlapping-user domain pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MIN_RATING: f64 = 0.5;
pub const MAX_RATING: f64 = 5.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {malformed} of {total} lines malformed")]
    Corrupt {
        path: PathBuf,
        malformed: usize,
        total: usize,
    },
    #[error("{path}: no usable records")]
    NoRecords { path: PathBuf },
    #[error("domain {domain}: no interactions left after joining titles ({dropped} dropped)")]
    EmptyAfterJoin { domain: String, dropped: usize },
    #[error("pair {pair}: {reason}")]
    Pairing { pair: String, reason: String },
    #[error("corpus file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One rating event of a user on an item within a named domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub timestamp: i64,
    pub domain: String,
}

/// True for multiples of 0.5 in `[0.5, 5.0]`.
pub fn is_valid_rating(r: f64) -> bool {
    r.is_finite() && (MIN_RATING..=MAX_RATING).contains(&r) && (r * 2.0).fract() == 0.0
}

/// Collapse runs of whitespace and trim.
pub fn normalize_title(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemCatalog {
    pub entries: BTreeMap<String, String>,
}

impl ItemCatalog {
    pub fn title(&self, item_id: &str) -> Option<&str> {
        self.entries.get(item_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain: String,
    pub interactions: Vec<Interaction>,
    pub catalog: ItemCatalog,
}

impl DomainDataset {
    pub fn users(&self) -> BTreeSet<&str> {
        self.interactions.iter().map(|i| i.user_id.as_str()).collect()
    }

    pub fn items(&self) -> BTreeSet<&str> {
        self.interactions.iter().map(|i| i.item_id.as_str()).collect()
    }
}

/// Counts reported by an ingest or join step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub parsed: usize,
    pub retained: usize,
    pub dropped: usize,
    pub malformed: usize,
}

#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub dataset: DomainDataset,
    pub counts: StageCounts,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct JoinOutcome {
    pub dataset: DomainDataset,
    pub counts: StageCounts,
    pub duplicate_catalog_ids: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedCorpus {
    pub pair_name: String,
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub overlap_users: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStats {
    pub source_items: usize,
    pub target_items: usize,
    pub source_users: usize,
    pub target_users: usize,
    pub overlap_users: usize,
    pub source_ratings: usize,
    pub target_ratings: usize,
}

#[derive(Deserialize)]
struct RawReview {
    #[serde(alias = "reviewerID", alias = "user_id")]
    reviewer_id: Option<String>,
    #[serde(alias = "asin", alias = "item_id", alias = "parent_asin")]
    item: Option<String>,
    #[serde(alias = "rating")]
    overall: Option<serde_json::Value>,
    #[serde(alias = "timestamp")]
    #[serde(rename = "unixReviewTime")]
    time: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct RawMeta {
    #[serde(alias = "item_id", alias = "parent_asin")]
    asin: Option<String>,
    title: Option<serde_json::Value>,
}

fn number_field(v: &serde_json::Value) -> Option<f64> {
    match v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn parse_review_line(line: &str, domain: &str) -> Option<Interaction> {
    let raw: RawReview = serde_json::from_str(line).ok()?;
    let user_id = raw.reviewer_id.filter(|s| !s.is_empty())?;
    let item_id = raw.item.filter(|s| !s.is_empty())?;
    let rating = number_field(raw.overall.as_ref()?)?;
    if !is_valid_rating(rating) {
        return None;
    }
    let timestamp = number_field(raw.time.as_ref()?)?;
    if !timestamp.is_finite() || timestamp.fract() != 0.0 {
        return None;
    }
    Some(Interaction {
        user_id,
        item_id,
        rating,
        timestamp: timestamp as i64,
        domain: domain.to_string(),
    })
}

fn read_lines(path: &Path) -> Result<(Vec<String>, String), CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let digest = hex::encode(Sha256::digest(&bytes));
    let text = String::from_utf8_lossy(&bytes);
    let lines = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect();
    Ok((lines, digest))
}

/// Parse a line-delimited review file into a deduplicated dataset with an
/// empty catalog. On a duplicate `(user, item)` the latest timestamp wins; on
/// equal timestamps the later line wins.
pub fn ingest_reviews(path: &Path, domain: &str) -> Result<IngestOutcome, CorpusError> {
    let (lines, sha256) = read_lines(path)?;
    let total = lines.len();
    let parsed: Vec<Option<Interaction>> = lines
        .par_iter()
        .map(|l| parse_review_line(l, domain))
        .collect();
    let malformed = parsed.iter().filter(|p| p.is_none()).count();
    if total == 0 || malformed == total {
        return Err(CorpusError::NoRecords {
            path: path.to_path_buf(),
        });
    }
    if malformed * 2 > total {
        return Err(CorpusError::Corrupt {
            path: path.to_path_buf(),
            malformed,
            total,
        });
    }
    if malformed > 0 {
        log::warn!("{}: skipped {malformed} malformed lines", path.display());
    }

    let mut latest: HashMap<(String, String), (usize, Interaction)> = HashMap::new();
    for (line_no, it) in parsed.into_iter().enumerate() {
        let Some(it) = it else { continue };
        let key = (it.user_id.clone(), it.item_id.clone());
        match latest.get(&key) {
            Some((_, prev)) if prev.timestamp > it.timestamp => {}
            _ => {
                latest.insert(key, (line_no, it));
            }
        }
    }
    let mut kept: Vec<(usize, Interaction)> = latest.into_values().collect();
    kept.sort_by_key(|(line_no, _)| *line_no);
    let interactions: Vec<Interaction> = kept.into_iter().map(|(_, it)| it).collect();

    let valid = total - malformed;
    let counts = StageCounts {
        parsed: valid,
        retained: interactions.len(),
        dropped: valid - interactions.len(),
        malformed,
    };
    Ok(IngestOutcome {
        dataset: DomainDataset {
            domain: domain.to_string(),
            interactions,
            catalog: ItemCatalog::default(),
        },
        counts,
        sha256,
    })
}

/// Load `item id → title` from a metadata file. Later entries for the same id
/// replace earlier ones; the number of such replacements is returned.
pub fn load_catalog(path: &Path) -> Result<(ItemCatalog, usize, String), CorpusError> {
    let (lines, sha256) = read_lines(path)?;
    let mut entries = BTreeMap::new();
    let mut duplicates = 0;
    for line in &lines {
        let Ok(raw) = serde_json::from_str::<RawMeta>(line) else {
            continue;
        };
        let (Some(asin), Some(serde_json::Value::String(title))) = (raw.asin, raw.title) else {
            continue;
        };
        let title = normalize_title(&title);
        if title.is_empty() {
            continue;
        }
        if entries.insert(asin.clone(), title).is_some() {
            duplicates += 1;
            log::warn!("{}: duplicate catalog entry for {asin}, keeping the last", path.display());
        }
    }
    Ok((ItemCatalog { entries }, duplicates, sha256))
}

/// Attach titles, dropping interactions whose item has no usable title.
pub fn join_catalog(ds: DomainDataset, catalog: &ItemCatalog) -> Result<JoinOutcome, CorpusError> {
    let parsed = ds.interactions.len();
    let interactions: Vec<Interaction> = ds
        .interactions
        .into_iter()
        .filter(|i| catalog.title(&i.item_id).is_some())
        .collect();
    let dropped = parsed - interactions.len();
    if interactions.is_empty() {
        return Err(CorpusError::EmptyAfterJoin {
            domain: ds.domain,
            dropped,
        });
    }
    let used: BTreeSet<&str> = interactions.iter().map(|i| i.item_id.as_str()).collect();
    let entries = catalog
        .entries
        .iter()
        .filter(|(id, _)| used.contains(id.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(JoinOutcome {
        dataset: DomainDataset {
            domain: ds.domain,
            interactions,
            catalog: ItemCatalog { entries },
        },
        counts: StageCounts {
            parsed,
            retained: parsed - dropped,
            dropped,
            malformed: 0,
        },
        duplicate_catalog_ids: 0,
    })
}

pub fn join_titles(ds: DomainDataset, catalog_path: &Path) -> Result<JoinOutcome, CorpusError> {
    let (catalog, duplicates, _) = load_catalog(catalog_path)?;
    let mut out = join_catalog(ds, &catalog)?;
    out.duplicate_catalog_ids = duplicates;
    Ok(out)
}

fn restrict(ds: &DomainDataset, users: &BTreeSet<String>) -> DomainDataset {
    let interactions: Vec<Interaction> = ds
        .interactions
        .iter()
        .filter(|i| users.contains(&i.user_id))
        .cloned()
        .collect();
    let used: BTreeSet<&str> = interactions.iter().map(|i| i.item_id.as_str()).collect();
    let entries = ds
        .catalog
        .entries
        .iter()
        .filter(|(id, _)| used.contains(id.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    DomainDataset {
        domain: ds.domain.clone(),
        interactions,
        catalog: ItemCatalog { entries },
    }
}

/// Keep only users present in both domains.
pub fn build_pair(
    source: &DomainDataset,
    target: &DomainDataset,
    pair_name: &str,
) -> Result<PairedCorpus, CorpusError> {
    let pairing = |reason: &str| CorpusError::Pairing {
        pair: pair_name.to_string(),
        reason: reason.to_string(),
    };
    if source.interactions.is_empty() || target.interactions.is_empty() {
        return Err(pairing("source and target must both be nonempty"));
    }
    let src_users = source.users();
    let overlap_users: BTreeSet<String> = target
        .users()
        .into_iter()
        .filter(|u| src_users.contains(u))
        .map(str::to_owned)
        .collect();
    if overlap_users.is_empty() {
        return Err(pairing("no overlapping users"));
    }
    Ok(PairedCorpus {
        pair_name: pair_name.to_string(),
        source: restrict(source, &overlap_users),
        target: restrict(target, &overlap_users),
        overlap_users,
    })
}

pub fn corpus_stats(pc: &PairedCorpus) -> PairStats {
    PairStats {
        source_items: pc.source.items().len(),
        target_items: pc.target.items().len(),
        source_users: pc.source.users().len(),
        target_users: pc.target.users().len(),
        overlap_users: pc.overlap_users.len(),
        source_ratings: pc.source.interactions.len(),
        target_ratings: pc.target.interactions.len(),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CorpusRecord {
    Header {
        pair_name: String,
        source_domain: String,
        target_domain: String,
    },
    Item {
        domain: String,
        item_id: String,
        title: String,
    },
    Rating(Interaction),
}

/// Write a paired corpus as line-delimited JSON records.
pub fn write_corpus(pc: &PairedCorpus, path: &Path) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let mut emit = |rec: &CorpusRecord| -> Result<(), CorpusError> {
        serde_json::to_writer(&mut out, rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    emit(&CorpusRecord::Header {
        pair_name: pc.pair_name.clone(),
        source_domain: pc.source.domain.clone(),
        target_domain: pc.target.domain.clone(),
    })?;
    for ds in [&pc.source, &pc.target] {
        for (item_id, title) in &ds.catalog.entries {
            emit(&CorpusRecord::Item {
                domain: ds.domain.clone(),
                item_id: item_id.clone(),
                title: title.clone(),
            })?;
        }
        for it in &ds.interactions {
            emit(&CorpusRecord::Rating(it.clone()))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<PairedCorpus, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |message: String| CorpusError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut header = None;
    let mut datasets: Vec<DomainDataset> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        match rec {
            CorpusRecord::Header {
                pair_name,
                source_domain,
                target_domain,
            } => {
                datasets = [source_domain, target_domain]
                    .into_iter()
                    .map(|domain| DomainDataset {
                        domain,
                        interactions: Vec::new(),
                        catalog: ItemCatalog::default(),
                    })
                    .collect();
                header = Some(pair_name);
            }
            CorpusRecord::Item {
                domain,
                item_id,
                title,
            } => {
                let ds = datasets
                    .iter_mut()
                    .find(|d| d.domain == domain)
                    .ok_or_else(|| bad(format!("line {}: unknown domain {domain}", n + 1)))?;
                ds.catalog.entries.insert(item_id, title);
            }
            CorpusRecord::Rating(it) => {
                let ds = datasets
                    .iter_mut()
                    .find(|d| d.domain == it.domain)
                    .ok_or_else(|| bad(format!("line {}: unknown domain {}", n + 1, it.domain)))?;
                ds.interactions.push(it);
            }
        }
    }
    let pair_name = header.ok_or_else(|| bad("missing header record".into()))?;
    let target = datasets.pop().expect("header creates two datasets");
    let source = datasets.pop().expect("header creates two datasets");
    let overlap_users = source
        .users()
        .intersection(&target.users())
        .map(|u| u.to_string())
        .collect();
    Ok(PairedCorpus {
        pair_name,
        source,
        target,
        overlap_users,
    })
}
