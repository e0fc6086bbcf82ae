use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use super::CompletionRecord;

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Content-addressed store: one JSON file per cache key, sharded by the first
/// two hex digits. Writes go through a temporary file and a rename so readers
/// never observe a partial entry.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("xx");
        self.dir.join(shard).join(format!("{key}.json"))
    }

    /// `Ok(None)` on a miss, `Err` when an entry exists but cannot be used.
    pub fn get(&self, key: &str) -> Result<Option<CompletionRecord>, String> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.to_string()),
        };
        let rec: CompletionRecord = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
        if rec.cache_key != key {
            return Err(format!("entry holds key {}", rec.cache_key));
        }
        Ok(Some(rec))
    }

    pub fn put(&self, rec: &CompletionRecord) -> std::io::Result<()> {
        let path = self.path_for(&rec.cache_key);
        let parent = path.parent().expect("sharded path has a parent");
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(
            ".{}.{}.{}.tmp",
            rec.cache_key,
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&serde_json::to_vec_pretty(rec).expect("record serializes"))?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, &path)
    }

    pub fn evict(&self, key: &str) {
        let _ = fs::remove_file(self.path_for(key));
    }

    /// Number of stored entries.
    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter(|e| e.path().is_dir())
            .flat_map(|e| fs::read_dir(e.path()).into_iter().flatten().flatten())
            .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
