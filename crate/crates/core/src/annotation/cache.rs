//! Append-only annotation cache.
//!
//! Records live in `<dir>/<model_id>-<shard>.jsonl`, one JSON object per
//! line, with the shard chosen from a hash of the turn id. A later line for
//! the same key replaces an earlier one. Every record is re-validated when
//! the cache is opened.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{InvalidAnnotation, ModelAnnotation, RankedEmotion};

pub const SHARDS: u8 = 16;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: unreadable cache record: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("{path}:{line}: cached annotation fails validation: {source}")]
    Invalid {
        path: PathBuf,
        line: usize,
        #[source]
        source: InvalidAnnotation,
    },
}

/// Identity of one cached answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub turn_id: String,
    pub model_id: String,
    pub model_name: String,
    pub prompt_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CacheStatus {
    Ok { emotions: Vec<RankedEmotion> },
    Failed { cause: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub turn_id: String,
    pub model_id: String,
    pub model_name: String,
    pub prompt_hash: String,
    #[serde(flatten)]
    pub status: CacheStatus,
}

impl CacheRecord {
    pub fn key(&self) -> CacheKey {
        CacheKey {
            turn_id: self.turn_id.clone(),
            model_id: self.model_id.clone(),
            model_name: self.model_name.clone(),
            prompt_hash: self.prompt_hash.clone(),
        }
    }

    pub fn annotation(&self) -> Option<ModelAnnotation> {
        match &self.status {
            CacheStatus::Ok { emotions } => Some(ModelAnnotation {
                model_id: self.model_id.clone(),
                turn_id: self.turn_id.clone(),
                emotions: emotions.clone(),
            }),
            CacheStatus::Failed { .. } => None,
        }
    }
}

pub fn shard_of(turn_id: &str) -> u8 {
    Sha256::digest(turn_id.as_bytes())[0] % SHARDS
}

/// Thread-safe handle over a cache directory. Distinct keys may be written
/// concurrently; a record is on disk before [`AnnotationCache::put`] returns.
#[derive(Debug)]
pub struct AnnotationCache {
    dir: PathBuf,
    index: RwLock<HashMap<CacheKey, CacheRecord>>,
    files: Mutex<HashMap<PathBuf, Arc<Mutex<File>>>>,
}

impl AnnotationCache {
    /// Opens (creating if needed) a cache directory and loads every record.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, CacheError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|source| CacheError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|source| CacheError::Io {
                path: dir.clone(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();

        let mut index = HashMap::new();
        for path in paths {
            for record in read_records(&path)? {
                index.insert(record.key(), record);
            }
        }
        Ok(AnnotationCache {
            dir,
            index: RwLock::new(index),
            files: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache index poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<CacheRecord> {
        self.index.read().expect("cache index poisoned").get(key).cloned()
    }

    /// All records, sorted by key.
    pub fn records(&self) -> Vec<CacheRecord> {
        let index = self.index.read().expect("cache index poisoned");
        let mut out: Vec<_> = index.values().cloned().collect();
        out.sort_by_key(|r| r.key());
        out
    }

    pub fn path_for(&self, model_id: &str, turn_id: &str) -> PathBuf {
        self.dir.join(format!("{model_id}-{:02}.jsonl", shard_of(turn_id)))
    }

    fn handle(&self, path: &Path) -> Result<Arc<Mutex<File>>, CacheError> {
        let mut files = self.files.lock().expect("cache file table poisoned");
        if let Some(f) = files.get(path) {
            return Ok(Arc::clone(f));
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| CacheError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let handle = Arc::new(Mutex::new(file));
        files.insert(path.to_path_buf(), Arc::clone(&handle));
        Ok(handle)
    }

    /// Appends a record and makes it visible to readers.
    pub fn put(&self, record: CacheRecord) -> Result<(), CacheError> {
        if let Some(ann) = record.annotation() {
            ann.validate().map_err(|source| CacheError::Invalid {
                path: self.path_for(&record.model_id, &record.turn_id),
                line: 0,
                source,
            })?;
        }
        let path = self.path_for(&record.model_id, &record.turn_id);
        let mut line = serde_json::to_string(&record).expect("cache record serializes");
        line.push('\n');
        {
            let handle = self.handle(&path)?;
            let mut file = handle.lock().expect("cache file poisoned");
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| CacheError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        self.index
            .write()
            .expect("cache index poisoned")
            .insert(record.key(), record);
        Ok(())
    }
}

fn read_records(path: &Path) -> Result<Vec<CacheRecord>, CacheError> {
    let file = File::open(path).map_err(|source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CacheError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CacheRecord = serde_json::from_str(&line).map_err(|e| CacheError::Corrupt {
            path: path.to_path_buf(),
            line: line_no,
            reason: e.to_string(),
        })?;
        if let Some(ann) = record.annotation() {
            ann.validate().map_err(|source| CacheError::Invalid {
                path: path.to_path_buf(),
                line: line_no,
                source,
            })?;
        }
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::mock_annotate;

    fn ok_record(turn: &str, model: &str) -> CacheRecord {
        let ann = mock_annotate(turn, model, 1);
        CacheRecord {
            turn_id: turn.into(),
            model_id: model.into(),
            model_name: "name".into(),
            prompt_hash: "abc".into(),
            status: CacheStatus::Ok { emotions: ann.emotions },
        }
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let rec = ok_record("t1", "m");
        let failed = CacheRecord {
            status: CacheStatus::Failed { cause: "timeout".into() },
            ..ok_record("t2", "m")
        };
        {
            let cache = AnnotationCache::open(dir.path()).unwrap();
            cache.put(rec.clone()).unwrap();
            cache.put(failed.clone()).unwrap();
            assert_eq!(cache.get(&rec.key()), Some(rec.clone()));
        }
        let reopened = AnnotationCache::open(dir.path()).unwrap();
        assert_eq!(reopened.get(&rec.key()), Some(rec.clone()));
        assert_eq!(reopened.get(&failed.key()), Some(failed));
        assert_eq!(reopened.len(), 2);
    }

    #[test]
    fn key_includes_prompt_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cache = AnnotationCache::open(dir.path()).unwrap();
        let rec = ok_record("t1", "m");
        cache.put(rec.clone()).unwrap();
        let mut other = rec.key();
        other.prompt_hash = "changed".into();
        assert!(cache.get(&other).is_none());
    }

    #[test]
    fn later_record_wins() {
        let dir = tempfile::tempdir().unwrap();
        let cache = AnnotationCache::open(dir.path()).unwrap();
        let failed = CacheRecord {
            status: CacheStatus::Failed { cause: "x".into() },
            ..ok_record("t1", "m")
        };
        cache.put(failed).unwrap();
        let ok = ok_record("t1", "m");
        cache.put(ok.clone()).unwrap();
        drop(cache);
        let reopened = AnnotationCache::open(dir.path()).unwrap();
        assert_eq!(reopened.get(&ok.key()), Some(ok));
    }

    #[test]
    fn invalid_record_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m-00.jsonl");
        fs::write(
            &path,
            r#"{"turn_id":"t","model_id":"m","model_name":"n","prompt_hash":"h","status":"ok","emotions":[{"label":"joy","valence":11,"arousal":5,"learning":5,"rank":1}]}
"#,
        )
        .unwrap();
        assert!(matches!(AnnotationCache::open(dir.path()), Err(CacheError::Invalid { line: 1, .. })));
        fs::write(&path, "garbage\n").unwrap();
        assert!(matches!(AnnotationCache::open(dir.path()), Err(CacheError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn concurrent_writers() {
        let dir = tempfile::tempdir().unwrap();
        let cache = AnnotationCache::open(dir.path()).unwrap();
        std::thread::scope(|s| {
            for w in 0..8 {
                let cache = &cache;
                s.spawn(move || {
                    for i in 0..50 {
                        cache.put(ok_record(&format!("t{w}-{i}"), "m")).unwrap();
                    }
                });
            }
        });
        assert_eq!(cache.len(), 400);
        drop(cache);
        assert_eq!(AnnotationCache::open(dir.path()).unwrap().len(), 400);
    }
}
