//! On-disk experiment store:
//!
//! ```text
//! <output_dir>/index.json                  experiment id -> status, config hash
//! <output_dir>/<id>/config.json            config snapshot
//! <output_dir>/<id>/events.jsonl           append-only stage log
//! <output_dir>/<id>/descriptions.jsonl     append-only DescriptionRecords (last entry per id wins)
//! <output_dir>/<id>/eval.json              EvalResults per backend and subset
//! <output_dir>/<id>/align/                 checkpoints, training_log.jsonl, kl_trace.csv
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inspect::DescriptionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Validated,
    Aligned,
    Generated,
    Judged,
    Evaluated,
    Reported,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub status: Status,
    pub config_hash: String,
}

pub const DESCRIPTIONS_FILE: &str = "descriptions.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const CONFIG_FILE: &str = "config.json";
pub const ALIGN_DIR: &str = "align";

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

/// Exclusive writer lock on one experiment; released on drop.
#[derive(Debug)]
pub struct WriterLock {
    path: PathBuf,
}

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_atomic(path: &Path, body: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn pid_alive(pid: u32) -> bool {
    let proc_root = Path::new("/proc");
    // without procfs we cannot tell; assume the holder is gone
    proc_root.is_dir() && proc_root.join(pid.to_string()).exists()
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn exp_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn index(&self) -> Result<BTreeMap<String, IndexEntry>> {
        let path = self.root.join("index.json");
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write_index(&self, index: &BTreeMap<String, IndexEntry>) -> Result<()> {
        write_atomic(&self.root.join("index.json"), serde_json::to_string_pretty(index)?.as_bytes())
    }

    pub fn status(&self, id: &str) -> Result<Option<Status>> {
        Ok(self.index()?.get(id).map(|e| e.status))
    }

    /// Takes the single-writer lock for `id`. A lock left by a dead process
    /// is taken over.
    pub fn lock(&self, id: &str) -> Result<WriterLock> {
        let dir = self.exp_dir(id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(".lock");
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                    return Ok(WriterLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).unwrap_or_default();
                    match holder.trim().parse::<u32>() {
                        Ok(pid) if pid != std::process::id() && pid_alive(pid) => {
                            return Err(Error::Config(format!(
                                "experiment {id} is being written by process {pid}"
                            )));
                        }
                        _ => {
                            log::warn!("removing stale lock {}", path.display());
                            let _ = fs::remove_file(&path);
                        }
                    }
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::Config(format!("could not lock experiment {id}")))
    }

    /// Registers a new experiment or confirms an existing one with the same
    /// config hash. Returns the current status.
    pub fn register(&self, id: &str, config_hash: &str) -> Result<Status> {
        let mut index = self.index()?;
        if let Some(e) = index.get(id) {
            if e.config_hash != config_hash {
                return Err(Error::Validation(format!(
                    "experiment {id} already exists with a different configuration"
                )));
            }
            return Ok(e.status);
        }
        index.insert(
            id.to_string(),
            IndexEntry { status: Status::Validated, config_hash: config_hash.to_string() },
        );
        self.write_index(&index)?;
        self.append_event(id, "validate", Status::Validated)?;
        Ok(Status::Validated)
    }

    /// Moves the status forward; never backwards.
    pub fn advance(&self, id: &str, status: Status) -> Result<Status> {
        let mut index = self.index()?;
        let entry = index
            .get_mut(id)
            .ok_or_else(|| Error::Validation(format!("experiment {id} has not been validated")))?;
        if status > entry.status {
            entry.status = status;
            self.write_index(&index)?;
        }
        let now = index[id].status;
        self.append_event(id, &format!("{status:?}").to_lowercase(), now)?;
        Ok(now)
    }

    fn append_event(&self, id: &str, stage: &str, status: Status) -> Result<()> {
        let line = serde_json::json!({ "stage": stage, "status": status });
        self.append_line(&self.exp_dir(id).join(EVENTS_FILE), &line.to_string())
    }

    fn append_line(&self, path: &Path, line: &str) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        f.sync_data().map_err(|e| Error::io(path, e))
    }

    pub fn append_descriptions(&self, id: &str, records: &[DescriptionRecord]) -> Result<()> {
        let path = self.exp_dir(id).join(DESCRIPTIONS_FILE);
        let mut body = String::new();
        for r in records {
            body.push_str(&serde_json::to_string(r)?);
            body.push('\n');
        }
        if body.is_empty() {
            return Ok(());
        }
        self.append_line(&path, body.trim_end())
    }

    /// Latest version of every record, in order of first appearance.
    pub fn load_descriptions(&self, id: &str) -> Result<Vec<DescriptionRecord>> {
        let path = self.exp_dir(id).join(DESCRIPTIONS_FILE);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut order: Vec<String> = Vec::new();
        let mut latest: BTreeMap<String, DescriptionRecord> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: DescriptionRecord = match serde_json::from_str(line) {
                Ok(r) => r,
                // a torn final line from a crash is skipped
                Err(e) if n + 1 == text.lines().count() => {
                    log::warn!("{}: ignoring incomplete last line: {e}", path.display());
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            if !latest.contains_key(&r.description_id) {
                order.push(r.description_id.clone());
            }
            latest.insert(r.description_id.clone(), r);
        }
        Ok(order.into_iter().map(|id| latest.remove(&id).expect("present")).collect())
    }

    pub fn write_json<T: Serialize>(&self, id: &str, name: &str, value: &T) -> Result<()> {
        let dir = self.exp_dir(id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_atomic(&dir.join(name), serde_json::to_string_pretty(value)?.as_bytes())
    }

    pub fn read_json<T: DeserializeOwned>(&self, id: &str, name: &str) -> Result<T> {
        let path = self.exp_dir(id).join(name);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
