//! Class-folder image datasets: `<root>/<split>/<class_dir>/<image files>`.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    /// Directory name.
    pub class_id: String,
    /// Directory name with underscores turned into spaces; substituted for
    /// `{CONCEPT}` in prompts.
    pub name: String,
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub root: PathBuf,
    pub split: String,
    pub classes: Vec<ClassEntry>,
}

pub fn display_name(class_id: &str) -> String {
    class_id.replace('_', " ")
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

impl DatasetSplit {
    /// Scans a split. When `expected_classes` is given, each must exist as a
    /// directory; otherwise every subdirectory is a class.
    pub fn scan(root: &Path, split: &str, expected_classes: Option<&[String]>) -> Result<Self> {
        let dir = root.join(split);
        if !dir.is_dir() {
            return Err(Error::Validation(format!("split directory {} not found", dir.display())));
        }
        let class_dirs: Vec<PathBuf> = match expected_classes {
            Some(list) => list
                .iter()
                .map(|c| {
                    let p = dir.join(c);
                    if p.is_dir() {
                        Ok(p)
                    } else {
                        Err(Error::Validation(format!("class directory {} not found", p.display())))
                    }
                })
                .collect::<Result<_>>()?,
            None => sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()).collect(),
        };
        let mut classes = Vec::with_capacity(class_dirs.len());
        for cdir in class_dirs {
            let class_id = cdir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Validation(format!("bad class directory {}", cdir.display())))?
                .to_string();
            let images: Vec<PathBuf> = sorted_entries(&cdir)?
                .into_iter()
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            if images.is_empty() {
                return Err(Error::Validation(format!("class directory {} has no images", cdir.display())));
            }
            classes.push(ClassEntry {
                name: display_name(&class_id),
                class_id,
                images,
            });
        }
        if classes.is_empty() {
            return Err(Error::Validation(format!("split {} has no classes", dir.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            split: split.to_string(),
            classes,
        })
    }

    pub fn class_ids(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.class_id.clone()).collect()
    }

    pub fn image_counts(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.images.len()).collect()
    }

    pub fn num_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    /// All images with their class index, class by class.
    pub fn labeled_images(&self) -> (Vec<PathBuf>, Vec<usize>) {
        let mut paths = Vec::new();
        let mut labels = Vec::new();
        for (i, c) in self.classes.iter().enumerate() {
            for p in &c.images {
                paths.push(p.clone());
                labels.push(i);
            }
        }
        (paths, labels)
    }

    /// Seeded sample of at most `max_per_class` images per class, in the
    /// original order.
    pub fn sample_per_class(&self, max_per_class: usize, seed: u64) -> Vec<ClassEntry> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let images = if c.images.len() <= max_per_class {
                    c.images.clone()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                    let mut idx = sample(&mut rng, c.images.len(), max_per_class).into_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|j| c.images[j].clone()).collect()
                };
                ClassEntry { images, ..c.clone() }
            })
            .collect()
    }
}
