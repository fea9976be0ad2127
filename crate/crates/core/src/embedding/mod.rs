//! Contrastive image/text encoders behind one interface.
//!
//! Every backend produces unit-normalized vectors of a fixed dimension. Raw
//! backend output is rounded to `f32` before normalization so that a vector
//! read back from the on-disk cache (which stores `f32`) normalizes to the
//! exact same bits as a freshly computed one.

mod cache;
mod synthetic;

pub use cache::{CacheManifest, CacheStats, EmbeddingCache};
pub use synthetic::{encode_layout_image, AxisSpec, HashProjection, KeywordAxis};

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Tolerance on the unit-norm contract.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// A unit-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `values` to unit L2 norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Input(format!(
                "cannot normalize vector with norm {norm}"
            )));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Rounds raw backend output to `f32` and normalizes the rounded values.
    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::normalized(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean of the unit image embeddings of one class. Not re-normalized: the dot
/// product with a unit text embedding is exactly the mean cosine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: String,
    pub vector: Vec<f64>,
    pub image_count: usize,
}

impl ClassPrototype {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.vector)
    }
}

/// Averages unit image embeddings into a class prototype.
///
/// Inputs are summed in a canonical (sorted) order, so the result is
/// bitwise independent of the order of `image_embeddings`.
pub fn build_prototype(
    class_id: impl Into<String>,
    image_embeddings: &[EmbeddingVector],
) -> Result<ClassPrototype> {
    let class_id = class_id.into();
    let first = image_embeddings
        .first()
        .ok_or_else(|| Error::Input(format!("class {class_id}: no image embeddings")))?;
    let dim = first.dim();
    if let Some(bad) = image_embeddings.iter().find(|e| e.dim() != dim) {
        return Err(Error::Input(format!(
            "class {class_id}: mixed dimensions {dim} and {}",
            bad.dim()
        )));
    }
    let mut ordered: Vec<&EmbeddingVector> = image_embeddings.iter().collect();
    ordered.sort_by(|a, b| cmp_vectors(a.as_slice(), b.as_slice()));
    let mut sum = vec![0.0; dim];
    for e in ordered {
        for (s, v) in sum.iter_mut().zip(e.as_slice()) {
            *s += v;
        }
    }
    let n = image_embeddings.len() as f64;
    Ok(ClassPrototype {
        class_id,
        vector: sum.into_iter().map(|s| s / n).collect(),
        image_count: image_embeddings.len(),
    })
}

pub(crate) fn cmp_vectors(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RealCheckpoint,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub dimension: usize,
    pub modalities: Vec<Modality>,
    pub provenance: Provenance,
    pub version: String,
}

/// A contrastive dual encoder. Implementations return raw (unnormalized)
/// vectors; normalization and caching happen in [`BackendRegistry`].
pub trait Encoder: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn raw_text(&self, text: &str) -> Result<Vec<f64>>;

    fn raw_image(&self, image: &image::DynamicImage) -> Result<Vec<f64>>;
}

/// Set of encoders available to a run, plus the optional image cache.
#[derive(Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn Encoder>>,
    cache: Option<EmbeddingCache>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_cache(mut self, cache: EmbeddingCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn cache(&self) -> Option<&EmbeddingCache> {
        self.cache.as_ref()
    }

    pub fn register(&mut self, encoder: Arc<dyn Encoder>) -> Result<()> {
        let id = encoder.descriptor().backend_id.clone();
        if self.backends.contains_key(&id) {
            return Err(Error::Config(format!("backend id {id} registered twice")));
        }
        self.backends.insert(id, encoder);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }

    pub fn get(&self, backend_id: &str) -> Result<&Arc<dyn Encoder>> {
        self.backends
            .get(backend_id)
            .ok_or_else(|| Error::Config(format!("unknown backend {backend_id}")))
    }

    pub fn descriptor(&self, backend_id: &str) -> Result<&BackendDescriptor> {
        Ok(self.get(backend_id)?.descriptor())
    }

    /// Encodes texts into unit vectors, one per input, in input order.
    pub fn encode_text<S: AsRef<str> + Sync>(
        &self,
        backend_id: &str,
        texts: &[S],
    ) -> Result<Vec<EmbeddingVector>> {
        let encoder = self.get(backend_id)?;
        if texts.is_empty() {
            return Err(Error::Input("encode_text called with no texts".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.as_ref().trim().is_empty()) {
            return Err(Error::Input(format!("text {i} is empty")));
        }
        texts
            .par_iter()
            .map(|t| finish(encoder.as_ref(), encoder.raw_text(t.as_ref())?))
            .collect()
    }

    /// Encodes image files, consulting the content-addressed cache first.
    /// A decoding failure is reported with the index of the offending item.
    pub fn encode_images<P: AsRef<Path> + Sync>(
        &self,
        backend_id: &str,
        image_refs: &[P],
    ) -> Result<Vec<EmbeddingVector>> {
        let encoder = self.get(backend_id)?;
        image_refs
            .par_iter()
            .enumerate()
            .map(|(index, path)| self.encode_one_image(encoder.as_ref(), index, path.as_ref()))
            .collect()
    }

    fn encode_one_image(
        &self,
        encoder: &dyn Encoder,
        index: usize,
        path: &Path,
    ) -> Result<EmbeddingVector> {
        let bad = |reason: String| Error::Image {
            index,
            path: path.to_path_buf(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| bad(e.to_string()))?;
        let desc = encoder.descriptor();
        let key = content_hash(&bytes);
        if let Some(cache) = &self.cache {
            if let Some(stored) = cache.get(desc, &key) {
                return EmbeddingVector::from_f32(&stored);
            }
        }
        let decoded = image::load_from_memory(&bytes).map_err(|e| bad(e.to_string()))?;
        let raw = encoder.raw_image(&decoded).map_err(|e| bad(e.to_string()))?;
        let rounded = round_to_f32(encoder, raw)?;
        if let Some(cache) = &self.cache {
            cache.put(desc, &key, &rounded);
        }
        EmbeddingVector::from_f32(&rounded)
    }
}

fn round_to_f32(encoder: &dyn Encoder, raw: Vec<f64>) -> Result<Vec<f32>> {
    let dim = encoder.descriptor().dimension;
    if raw.len() != dim {
        return Err(Error::Input(format!(
            "backend {} emitted dimension {} instead of {dim}",
            encoder.descriptor().backend_id,
            raw.len()
        )));
    }
    Ok(raw.into_iter().map(|v| v as f32).collect())
}

fn finish(encoder: &dyn Encoder, raw: Vec<f64>) -> Result<EmbeddingVector> {
    EmbeddingVector::from_f32(&round_to_f32(encoder, raw)?)
}

/// Hex sha256 of the given bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Lowercased alphanumeric word tokens, as used by the synthetic encoders.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}
