//! Append-only JSONL response caches, one file per purpose.
//!
//! Records are never rewritten in place. Loading keeps the first record
//! seen for a key, so a crash mid-append or a racing duplicate cannot
//! change an already-recorded answer. Lines that fail to parse are
//! skipped rather than poisoning the whole file.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{CacheRecord, Purpose};

struct PurposeCache {
    entries: HashMap<String, String>,
    writer: BufWriter<File>,
}

/// All three purpose caches rooted in one directory.
pub(super) struct PurposeCaches {
    dir: PathBuf,
    caches: HashMap<Purpose, PurposeCache>,
}

impl PurposeCaches {
    pub fn open(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(PurposeCaches {
            dir: dir.to_path_buf(),
            caches: HashMap::new(),
        })
    }

    fn cache_mut(&mut self, purpose: Purpose) -> io::Result<&mut PurposeCache> {
        if !self.caches.contains_key(&purpose) {
            let path = self.dir.join(purpose.cache_file());
            let mut entries = HashMap::new();
            if path.exists() {
                let reader = BufReader::new(File::open(&path)?);
                for line in reader.lines() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    if let Ok(record) = serde_json::from_str::<CacheRecord>(&line) {
                        entries.entry(record.key).or_insert(record.response_text);
                    }
                }
            }
            let file = OpenOptions::new().create(true).append(true).open(&path)?;
            self.caches.insert(
                purpose,
                PurposeCache {
                    entries,
                    writer: BufWriter::new(file),
                },
            );
        }
        Ok(self.caches.get_mut(&purpose).expect("just inserted"))
    }

    pub fn get(&mut self, purpose: Purpose, key: &str) -> Option<String> {
        match self.cache_mut(purpose) {
            Ok(cache) => cache.entries.get(key).cloned(),
            Err(_) => None,
        }
    }

    /// Insert and persist unless the key is already present.
    pub fn insert(&mut self, record: CacheRecord) -> io::Result<()> {
        let purpose = record.request.purpose;
        let cache = self.cache_mut(purpose)?;
        if cache.entries.contains_key(&record.key) {
            return Ok(());
        }
        let line = serde_json::to_string(&record).map_err(io::Error::other)?;
        cache.writer.write_all(line.as_bytes())?;
        cache.writer.write_all(b"\n")?;
        cache.writer.flush()?;
        cache.entries.insert(record.key, record.response_text);
        Ok(())
    }
}
