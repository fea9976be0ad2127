//! Seed-deterministic encoders that need no model download.
//!
//! `HashProjection` maps every word to a pseudo-random Gaussian direction and
//! images to a fixed random projection of a 16x16 grayscale thumbnail.
//!
//! `KeywordAxis` reserves one coordinate per named axis; words listed for an
//! axis add weight on it and every other word lands in the residual
//! coordinates. Its image encoder reads the first `dimension` 16-bit luma
//! pixels in raster order as coordinates in [-1, 1], so a fixture image can
//! carry an exact embedding.

use std::collections::HashMap;

use image::imageops::FilterType;
use image::DynamicImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{word_tokens, BackendDescriptor, Encoder, Modality, Provenance};
use crate::error::{Error, Result};

const HASH_PROJECTION_VERSION: &str = "hash-projection/1";
const KEYWORD_AXIS_VERSION: &str = "keyword-axis/1";
const THUMBNAIL: u32 = 16;

fn seed_for(seed: u64, tag: &str, item: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(item.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 is 32 bytes"))
}

fn gaussian(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn descriptor(id: &str, dimension: usize, version: &str) -> BackendDescriptor {
    BackendDescriptor {
        backend_id: id.to_string(),
        dimension,
        modalities: vec![Modality::Text, Modality::Image],
        provenance: Provenance::Synthetic,
        version: version.to_string(),
    }
}

pub struct HashProjection {
    descriptor: BackendDescriptor,
    seed: u64,
    projection: Vec<Vec<f64>>,
}

impl HashProjection {
    pub fn new(backend_id: &str, dimension: usize, seed: u64) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Config("hash-projection dimension must be positive".into()));
        }
        let pixels = (THUMBNAIL * THUMBNAIL) as usize;
        let projection = (0..dimension)
            .map(|row| gaussian(seed_for(seed, "image-row", &row.to_string()), pixels))
            .collect();
        Ok(Self {
            descriptor: descriptor(backend_id, dimension, HASH_PROJECTION_VERSION),
            seed,
            projection,
        })
    }
}

impl Encoder for HashProjection {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn raw_text(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = word_tokens(text);
        if tokens.is_empty() {
            return Err(Error::Input(format!("text {text:?} has no word tokens")));
        }
        let mut out = vec![0.0; self.descriptor.dimension];
        for tok in tokens {
            for (o, g) in out
                .iter_mut()
                .zip(gaussian(seed_for(self.seed, "word", &tok), self.descriptor.dimension))
            {
                *o += g;
            }
        }
        Ok(out)
    }

    fn raw_image(&self, image: &DynamicImage) -> Result<Vec<f64>> {
        let thumb = image
            .resize_exact(THUMBNAIL, THUMBNAIL, FilterType::Triangle)
            .to_luma16();
        let px: Vec<f64> = thumb
            .pixels()
            .map(|p| f64::from(p.0[0]) / 65535.0 - 0.5)
            .collect();
        Ok(self
            .projection
            .iter()
            .map(|row| super::dot(row, &px))
            .collect())
    }
}

/// One keyword axis: every listed word adds `weight` on the axis coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub name: String,
    pub keywords: Vec<String>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

pub struct KeywordAxis {
    descriptor: BackendDescriptor,
    axes: Vec<AxisSpec>,
    lookup: HashMap<String, usize>,
    residual_weight: f64,
    seed: u64,
}

impl KeywordAxis {
    pub fn new(
        backend_id: &str,
        dimension: usize,
        axes: Vec<AxisSpec>,
        residual_weight: f64,
        seed: u64,
    ) -> Result<Self> {
        if dimension <= axes.len() {
            return Err(Error::Config(format!(
                "keyword-axis backend {backend_id}: dimension {dimension} leaves no residual coordinates for {} axes",
                axes.len()
            )));
        }
        let mut lookup = HashMap::new();
        for (i, axis) in axes.iter().enumerate() {
            for kw in &axis.keywords {
                let kw = kw.to_lowercase();
                if let Some(prev) = lookup.insert(kw.clone(), i) {
                    if prev != i {
                        return Err(Error::Config(format!(
                            "keyword {kw:?} assigned to axes {} and {}",
                            axes[prev].name, axis.name
                        )));
                    }
                }
            }
        }
        Ok(Self {
            descriptor: descriptor(backend_id, dimension, KEYWORD_AXIS_VERSION),
            axes,
            lookup,
            residual_weight,
            seed,
        })
    }

    /// Coordinate index of the named axis.
    pub fn axis_index(&self, name: &str) -> Option<usize> {
        self.axes.iter().position(|a| a.name == name)
    }

    pub fn axes(&self) -> &[AxisSpec] {
        &self.axes
    }
}

impl Encoder for KeywordAxis {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn raw_text(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = word_tokens(text);
        if tokens.is_empty() {
            return Err(Error::Input(format!("text {text:?} has no word tokens")));
        }
        let n_axes = self.axes.len();
        let residual = self.descriptor.dimension - n_axes;
        let mut out = vec![0.0; self.descriptor.dimension];
        for tok in tokens {
            match self.lookup.get(&tok) {
                Some(&axis) => out[axis] += self.axes[axis].weight,
                None => {
                    let g = gaussian(seed_for(self.seed, "residual", &tok), residual);
                    let norm = super::l2_norm(&g);
                    for (o, v) in out[n_axes..].iter_mut().zip(g) {
                        *o += self.residual_weight * v / norm;
                    }
                }
            }
        }
        Ok(out)
    }

    fn raw_image(&self, image: &DynamicImage) -> Result<Vec<f64>> {
        let luma = image.to_luma16();
        let d = self.descriptor.dimension;
        let pixels = (luma.width() * luma.height()) as usize;
        if pixels < d {
            return Err(Error::Input(format!(
                "image has {} pixels, keyword-axis layout needs {d}",
                luma.width() * luma.height()
            )));
        }
        Ok(luma
            .pixels()
            .take(d)
            .map(|p| f64::from(p.0[0]) / 65535.0 * 2.0 - 1.0)
            .collect())
    }
}

/// Writes `coords` (each in [-1, 1]) into a 16-bit grayscale image in the
/// layout read by [`KeywordAxis`].
pub fn encode_layout_image(coords: &[f64], width: u32) -> image::ImageBuffer<image::Luma<u16>, Vec<u16>> {
    let height = (coords.len() as u32).div_ceil(width).max(1);
    let mut img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> = image::ImageBuffer::new(width, height);
    for (i, px) in img.pixels_mut().enumerate() {
        let v = coords.get(i).copied().unwrap_or(0.0).clamp(-1.0, 1.0);
        px.0[0] = ((v + 1.0) / 2.0 * 65535.0).round() as u16;
    }
    img
}
