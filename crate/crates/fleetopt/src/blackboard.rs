//! Versioned key-value store shared by the agents.
//!
//! Every successful write bumps the key's version by one and the global
//! store revision by one. Writes go through a single writer lock, so
//! compare-and-swap on `expected_version` is linearizable; readers take a
//! shared lock on the index only long enough to clone an `Arc`.
//!
//! On disk a store is a directory with two files:
//!
//! ```text
//! blackboard.log   MAGIC ENTRY*
//!   MAGIC  = b"FOBBLOG1"
//!   ENTRY  = len:u32le crc32:u32le payload[len]
//!   payload = JSON {"key","value","version","store_revision","written_at"}
//! snapshot.json    {"revision": u64, "records": [payload, ...]}   (optional)
//! ```
//!
//! `crc32` is the IEEE CRC of the payload bytes. A short final entry (crash
//! mid-append) is truncated on open; a complete entry with a bad checksum is
//! reported as corruption. Compaction writes the latest record of every key
//! to `snapshot.json` and empties the log; history before the snapshot
//! revision is then gone.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use fleetopt_core::Millis;
use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const LOG_FILE: &str = "blackboard.log";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
const MAGIC: &[u8; 8] = b"FOBBLOG1";

#[derive(Debug, Error)]
pub enum BlackboardError {
    #[error("version conflict on {key}: expected {expected}, found {actual}")]
    VersionConflict { key: String, expected: u64, actual: u64 },
    #[error("invalid key {0:?}")]
    InvalidKey(String),
    #[error("revision {requested} is ahead of the store (at {current})")]
    FutureRevision { requested: u64, current: u64 },
    #[error("history before revision {base} was compacted (asked for {requested})")]
    HistoryCompacted { requested: u64, base: u64 },
    #[error("corrupt log at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("value at {key} does not decode: {source}")]
    Decode { key: String, source: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionedRecord {
    pub key: String,
    pub value: Value,
    pub version: u64,
    pub store_revision: u64,
    pub written_at: Millis,
}

impl VersionedRecord {
    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, BlackboardError> {
        T::deserialize(&self.value)
            .map_err(|source| BlackboardError::Decode { key: self.key.clone(), source })
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Millis;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Millis {
        chrono::Utc::now().timestamp_millis()
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct FixedClock(AtomicI64);

impl FixedClock {
    pub fn new(at: Millis) -> Self {
        FixedClock(AtomicI64::new(at))
    }

    pub fn set(&self, at: Millis) {
        self.0.store(at, Ordering::SeqCst);
    }

    pub fn advance(&self, by: Millis) {
        self.0.fetch_add(by, Ordering::SeqCst);
    }
}

impl Clock for FixedClock {
    fn now(&self) -> Millis {
        self.0.load(Ordering::SeqCst)
    }
}

/// Keys are `/`-separated paths: a leading `/`, no empty segments, no
/// trailing `/`, no control characters.
pub fn validate_key(key: &str) -> Result<(), BlackboardError> {
    let ok = key.len() > 1
        && key.starts_with('/')
        && !key.ends_with('/')
        && !key.contains("//")
        && !key.chars().any(char::is_control);
    if ok {
        Ok(())
    } else {
        Err(BlackboardError::InvalidKey(key.to_string()))
    }
}

#[derive(Debug, Default)]
struct Index {
    latest: BTreeMap<String, Arc<VersionedRecord>>,
    /// Writes after `base_revision`, in revision order.
    history: Vec<Arc<VersionedRecord>>,
    base_revision: u64,
    revision: u64,
}

impl Index {
    fn apply(&mut self, rec: Arc<VersionedRecord>) {
        self.revision = rec.store_revision;
        self.latest.insert(rec.key.clone(), rec.clone());
        self.history.push(rec);
    }
}

#[derive(Debug)]
struct LogWriter {
    dir: PathBuf,
    file: File,
    sync: bool,
}

#[derive(Debug, Clone, Default)]
pub struct StoreOptions {
    /// `fsync` after every append.
    pub sync: bool,
    /// Compact automatically after this many writes since the last snapshot.
    pub compact_after: Option<u64>,
}

/// Consistent view of the latest records at one store revision.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub revision: u64,
    records: BTreeMap<String, Arc<VersionedRecord>>,
}

impl Snapshot {
    pub fn get(&self, key: &str) -> Option<&VersionedRecord> {
        self.records.get(key).map(|r| r.as_ref())
    }

    pub fn list_prefix(&self, prefix: &str) -> Vec<VersionedRecord> {
        self.records
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, r)| (**r).clone())
            .collect()
    }
}

pub struct Blackboard {
    index: RwLock<Index>,
    writer: Mutex<Option<LogWriter>>,
    clock: Arc<dyn Clock>,
    compact_after: Option<u64>,
}

impl std::fmt::Debug for Blackboard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Blackboard").field("revision", &self.revision()).finish()
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    revision: u64,
    records: Vec<VersionedRecord>,
}

impl Blackboard {
    /// Store that lives only in memory.
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Blackboard {
            index: RwLock::new(Index::default()),
            writer: Mutex::new(None),
            clock,
            compact_after: None,
        }
    }

    /// Opens (or creates) a store in `dir`, replaying snapshot and log.
    pub fn open(dir: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self, BlackboardError> {
        Self::open_with(dir, clock, StoreOptions::default())
    }

    pub fn open_with(
        dir: impl AsRef<Path>,
        clock: Arc<dyn Clock>,
        opts: StoreOptions,
    ) -> Result<Self, BlackboardError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut index = Index::default();

        let snap_path = dir.join(SNAPSHOT_FILE);
        if snap_path.exists() {
            let snap: SnapshotFile = serde_json::from_slice(&fs::read(&snap_path)?)?;
            for rec in snap.records {
                index.latest.insert(rec.key.clone(), Arc::new(rec));
            }
            index.base_revision = snap.revision;
            index.revision = snap.revision;
        }

        let log_path = dir.join(LOG_FILE);
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&log_path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let valid_len = if bytes.is_empty() { 0 } else { replay(&bytes, &mut index)? };
        if valid_len < bytes.len() as u64 {
            file.set_len(valid_len)?;
        }
        file.seek(SeekFrom::End(0))?;
        if valid_len == 0 {
            file.write_all(MAGIC)?;
        }

        Ok(Blackboard {
            index: RwLock::new(index),
            writer: Mutex::new(Some(LogWriter { dir, file, sync: opts.sync })),
            clock,
            compact_after: opts.compact_after,
        })
    }

    pub fn revision(&self) -> u64 {
        self.index.read().revision
    }

    pub fn now(&self) -> Millis {
        self.clock.now()
    }

    pub fn put(
        &self,
        key: &str,
        value: Value,
        expected_version: Option<u64>,
    ) -> Result<(u64, u64), BlackboardError> {
        validate_key(key)?;
        let mut writer = self.writer.lock();
        let (current, revision) = {
            let idx = self.index.read();
            (idx.latest.get(key).map_or(0, |r| r.version), idx.revision)
        };
        if let Some(expected) = expected_version {
            if expected != current {
                return Err(BlackboardError::VersionConflict {
                    key: key.to_string(),
                    expected,
                    actual: current,
                });
            }
        }
        let rec = VersionedRecord {
            key: key.to_string(),
            value,
            version: current + 1,
            store_revision: revision + 1,
            written_at: self.clock.now(),
        };
        if let Some(w) = writer.as_mut() {
            append(w, &rec)?;
        }
        let out = (rec.version, rec.store_revision);
        let since_base = {
            let mut idx = self.index.write();
            idx.apply(Arc::new(rec));
            idx.revision - idx.base_revision
        };
        if let (Some(limit), Some(w)) = (self.compact_after, writer.as_mut()) {
            if since_base >= limit {
                self.compact_locked(w)?;
            }
        }
        Ok(out)
    }

    /// Serializes `value` and writes it with `put`.
    pub fn put_json<T: Serialize>(
        &self,
        key: &str,
        value: &T,
        expected_version: Option<u64>,
    ) -> Result<(u64, u64), BlackboardError> {
        self.put(key, serde_json::to_value(value)?, expected_version)
    }

    /// Read-modify-write with compare-and-swap, retried up to `attempts`
    /// times on a version conflict.
    pub fn update<F>(&self, key: &str, attempts: usize, mut f: F) -> Result<(u64, u64), BlackboardError>
    where
        F: FnMut(Option<&VersionedRecord>) -> Result<Value, BlackboardError>,
    {
        let mut last = None;
        for _ in 0..attempts.max(1) {
            let current = self.get(key);
            let value = f(current.as_ref())?;
            let expected = current.map_or(0, |r| r.version);
            match self.put(key, value, Some(expected)) {
                Ok(v) => return Ok(v),
                Err(e @ BlackboardError::VersionConflict { .. }) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    pub fn get(&self, key: &str) -> Option<VersionedRecord> {
        let rec = self.index.read().latest.get(key).cloned();
        rec.map(|r| (*r).clone())
    }

    pub fn get_as<T: DeserializeOwned>(&self, key: &str) -> Result<Option<(T, u64)>, BlackboardError> {
        match self.get(key) {
            Some(r) => Ok(Some((r.decode()?, r.version))),
            None => Ok(None),
        }
    }

    /// A specific version of a key, if it is still in history (or is the
    /// latest).
    pub fn get_version(&self, key: &str, version: u64) -> Option<VersionedRecord> {
        let idx = self.index.read();
        if let Some(r) = idx.latest.get(key).filter(|r| r.version == version) {
            return Some((**r).clone());
        }
        idx.history
            .iter()
            .find(|r| r.key == key && r.version == version)
            .map(|r| (**r).clone())
    }

    /// Latest record of `key` as of `revision`.
    pub fn get_at(&self, key: &str, revision: u64) -> Result<Option<VersionedRecord>, BlackboardError> {
        let idx = self.index.read();
        if revision > idx.revision {
            return Err(BlackboardError::FutureRevision { requested: revision, current: idx.revision });
        }
        if let Some(r) = idx.latest.get(key).filter(|r| r.store_revision <= revision) {
            return Ok(Some((**r).clone()));
        }
        if revision < idx.base_revision {
            return Err(BlackboardError::HistoryCompacted { requested: revision, base: idx.base_revision });
        }
        Ok(idx
            .history
            .iter()
            .rev()
            .find(|r| r.key == key && r.store_revision <= revision)
            .map(|r| (**r).clone()))
    }

    pub fn list_prefix(&self, prefix: &str) -> Vec<VersionedRecord> {
        let idx = self.index.read();
        let found: Vec<Arc<VersionedRecord>> = idx
            .latest
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, r)| r.clone())
            .collect();
        drop(idx);
        found.into_iter().map(|r| (*r).clone()).collect()
    }

    pub fn changes_since(&self, revision: u64) -> Result<Vec<VersionedRecord>, BlackboardError> {
        let idx = self.index.read();
        if revision > idx.revision {
            return Err(BlackboardError::FutureRevision { requested: revision, current: idx.revision });
        }
        if revision < idx.base_revision {
            return Err(BlackboardError::HistoryCompacted { requested: revision, base: idx.base_revision });
        }
        let start = idx.history.partition_point(|r| r.store_revision <= revision);
        Ok(idx.history[start..].iter().map(|r| (**r).clone()).collect())
    }

    pub fn snapshot(&self) -> Snapshot {
        let idx = self.index.read();
        Snapshot { revision: idx.revision, records: idx.latest.clone() }
    }

    /// Writes the latest records to `snapshot.json` and empties the log.
    /// No-op for an in-memory store.
    pub fn compact(&self) -> Result<(), BlackboardError> {
        let mut writer = self.writer.lock();
        match writer.as_mut() {
            Some(w) => self.compact_locked(w),
            None => Ok(()),
        }
    }

    fn compact_locked(&self, w: &mut LogWriter) -> Result<(), BlackboardError> {
        let snap = {
            let idx = self.index.read();
            SnapshotFile {
                revision: idx.revision,
                records: idx.latest.values().map(|r| (**r).clone()).collect(),
            }
        };
        let tmp = w.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&serde_json::to_vec(&snap)?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, w.dir.join(SNAPSHOT_FILE))?;
        w.file.set_len(MAGIC.len() as u64)?;
        w.file.seek(SeekFrom::End(0))?;
        w.file.sync_all()?;
        let mut idx = self.index.write();
        idx.history.clear();
        idx.base_revision = snap.revision;
        Ok(())
    }
}

fn append(w: &mut LogWriter, rec: &VersionedRecord) -> Result<(), BlackboardError> {
    let payload = serde_json::to_vec(rec)?;
    let mut buf = Vec::with_capacity(payload.len() + 8);
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    buf.extend_from_slice(&payload);
    w.file.write_all(&buf)?;
    if w.sync {
        w.file.sync_data()?;
    }
    Ok(())
}

/// Replays log entries into `index`; returns the length of the valid prefix.
fn replay(bytes: &[u8], index: &mut Index) -> Result<u64, BlackboardError> {
    if bytes.len() < MAGIC.len() {
        // A crash while writing the header of a fresh log.
        if MAGIC.starts_with(bytes) {
            return Ok(0);
        }
        return Err(BlackboardError::Corrupt { offset: 0, reason: "bad header".into() });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(BlackboardError::Corrupt { offset: 0, reason: "bad header".into() });
    }
    let mut pos = MAGIC.len();
    while pos < bytes.len() {
        if bytes.len() - pos < 8 {
            break;
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        let start = pos + 8;
        if bytes.len() - start < len {
            break;
        }
        let payload = &bytes[start..start + len];
        if crc32fast::hash(payload) != crc {
            return Err(BlackboardError::Corrupt { offset: pos as u64, reason: "checksum mismatch".into() });
        }
        let rec: VersionedRecord = serde_json::from_slice(payload).map_err(|e| BlackboardError::Corrupt {
            offset: pos as u64,
            reason: e.to_string(),
        })?;
        if rec.store_revision <= index.revision {
            // Already covered by the snapshot (crash between snapshot rename
            // and log truncation).
            pos = start + len;
            continue;
        }
        if rec.store_revision != index.revision + 1 {
            return Err(BlackboardError::Corrupt {
                offset: pos as u64,
                reason: format!("revision gap: {} after {}", rec.store_revision, index.revision),
            });
        }
        index.apply(Arc::new(rec));
        pos = start + len;
    }
    Ok(pos as u64)
}
