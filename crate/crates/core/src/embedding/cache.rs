//! Content-addressed store of `f32` image embeddings.
//!
//! Layout: `<root>/<backend_id>/manifest.json` plus one little-endian `f32`
//! file per image at `<root>/<backend_id>/<hash[..2]>/<hash>.f32`. Keys are
//! content hashes, so moving a dataset around keeps the cache valid.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::BackendDescriptor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub backend_id: String,
    pub dimension: usize,
    pub version: String,
    pub created_at: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub write_failures: u64,
}

/// Many readers, one writer at a time.
pub struct EmbeddingCache {
    root: PathBuf,
    write_lock: Mutex<()>,
    hits: AtomicU64,
    misses: AtomicU64,
    write_failures: AtomicU64,
}

impl EmbeddingCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            write_lock: Mutex::new(()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            write_failures: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            write_failures: self.write_failures.load(Ordering::Relaxed),
        }
    }

    fn backend_dir(&self, desc: &BackendDescriptor) -> PathBuf {
        self.root.join(sanitize(&desc.backend_id))
    }

    fn entry_path(&self, desc: &BackendDescriptor, key: &str) -> PathBuf {
        let prefix = key.get(..2).unwrap_or(key);
        self.backend_dir(desc).join(prefix).join(format!("{key}.f32"))
    }

    pub fn manifest(&self, desc: &BackendDescriptor) -> Option<CacheManifest> {
        let text = fs::read_to_string(self.backend_dir(desc).join("manifest.json")).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn manifest_matches(&self, desc: &BackendDescriptor) -> bool {
        self.manifest(desc).is_some_and(|m| {
            m.backend_id == desc.backend_id
                && m.dimension == desc.dimension
                && m.version == desc.version
        })
    }

    pub fn get(&self, desc: &BackendDescriptor, key: &str) -> Option<Vec<f32>> {
        let found = self.read_entry(desc, key);
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    fn read_entry(&self, desc: &BackendDescriptor, key: &str) -> Option<Vec<f32>> {
        if !self.manifest_matches(desc) {
            return None;
        }
        let bytes = fs::read(self.entry_path(desc, key)).ok()?;
        if bytes.len() != desc.dimension * 4 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect(),
        )
    }

    /// Stores a vector. Failures are logged and counted, never returned.
    pub fn put(&self, desc: &BackendDescriptor, key: &str, values: &[f32]) {
        if let Err(e) = self.try_put(desc, key, values) {
            self.write_failures.fetch_add(1, Ordering::Relaxed);
            log::warn!("embedding cache write failed for {key}: {e}");
        }
    }

    fn try_put(&self, desc: &BackendDescriptor, key: &str, values: &[f32]) -> Result<()> {
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let dir = self.backend_dir(desc);
        if !self.manifest_matches(desc) {
            if dir.exists() {
                // stale layout from another backend version
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let manifest = CacheManifest {
                backend_id: desc.backend_id.clone(),
                dimension: desc.dimension,
                version: desc.version.clone(),
                created_at: chrono::Utc::now().to_rfc3339(),
            };
            let path = dir.join("manifest.json");
            fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
                .map_err(|e| Error::io(&path, e))?;
        }
        let path = self.entry_path(desc, key);
        let parent = path.parent().expect("entry has a parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}
