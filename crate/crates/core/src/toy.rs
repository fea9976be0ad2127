//! A small synthetic world for exercising the whole pipeline offline: three
//! big-cat classes whose images (under the keyword-axis encoder) point
//! mostly at one visual and one habitat keyword, a weak class-name signal,
//! and a shared "photo" direction, plus a reference language model
//! pretrained on class-agnostic answers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{encode_layout_image, AxisSpec, KeywordAxis};
use crate::error::{Error, Result};
use crate::lm::{pretrain, PretrainConfig, PretrainExample, TinyLm, TinyLmConfig, Tokenizer};
use crate::prompts::{PromptBank, QUESTIONS25};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpecies {
    pub class_id: String,
    pub visual: String,
    pub habitat: String,
}

pub fn species() -> Vec<ToySpecies> {
    [("tiger", "striped", "jungle"), ("leopard", "spotted", "savanna"), ("panther", "black", "rainforest")]
        .into_iter()
        .map(|(c, v, h)| ToySpecies {
            class_id: c.into(),
            visual: v.into(),
            habitat: h.into(),
        })
        .collect()
}

pub const PHOTO_WORDS: &[&str] = &["photo", "image", "picture", "click", "enlarge"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub dimension: usize,
    pub residual_weight: f64,
    pub name_weight: f64,
    pub visual_weight: f64,
    pub habitat_weight: f64,
    pub photo_weight: f64,
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dimension: 32,
            residual_weight: 0.5,
            name_weight: 0.35,
            visual_weight: 1.0,
            habitat_weight: 0.8,
            photo_weight: 0.3,
            noise: 0.35,
            train_per_class: 16,
            test_per_class: 20,
            seed: 7,
        }
    }
}

/// Axis order: photo, class names, visual words, habitat words.
pub fn axes(species: &[ToySpecies]) -> Vec<AxisSpec> {
    let mut axes = vec![AxisSpec {
        name: "photo".into(),
        keywords: PHOTO_WORDS.iter().map(|s| s.to_string()).collect(),
        weight: 1.0,
    }];
    for s in species {
        axes.push(AxisSpec { name: format!("name:{}", s.class_id), keywords: vec![s.class_id.clone()], weight: 1.0 });
    }
    for s in species {
        axes.push(AxisSpec { name: format!("visual:{}", s.visual), keywords: vec![s.visual.clone()], weight: 1.0 });
    }
    for s in species {
        axes.push(AxisSpec { name: format!("habitat:{}", s.habitat), keywords: vec![s.habitat.clone()], weight: 1.0 });
    }
    axes
}

pub fn keyword_backend(backend_id: &str, cfg: &ToyConfig) -> Result<KeywordAxis> {
    KeywordAxis::new(backend_id, cfg.dimension, axes(&species()), cfg.residual_weight, cfg.seed)
}

/// Mean image direction for each class in the keyword-axis layout.
pub fn class_means(cfg: &ToyConfig) -> Vec<Vec<f64>> {
    let sp = species();
    let n = sp.len();
    (0..n)
        .map(|k| {
            let mut v = vec![0.0; cfg.dimension];
            v[0] = cfg.photo_weight;
            v[1 + k] = cfg.name_weight;
            v[1 + n + k] = cfg.visual_weight;
            v[1 + 2 * n + k] = cfg.habitat_weight;
            v
        })
        .collect()
}

/// Writes `<root>/<split>/<class>/<i>.png` images whose layout pixels are the
/// class mean plus Gaussian noise, scaled into [-1, 1].
pub fn write_layout_split(
    root: &Path,
    split: &str,
    classes: &[(String, Vec<f64>)],
    per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<()> {
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
    for (k, (class_id, mean)) in classes.iter().enumerate() {
        let dir = root.join(split).join(class_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32) ^ split.len() as u64 * 7919);
        for i in 0..per_class {
            let v: Vec<f64> = mean.iter().map(|m| m + normal.sample(&mut rng)).collect();
            let peak = v.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-9);
            let scaled: Vec<f64> = v.iter().map(|x| x / peak).collect();
            let width = (mean.len() as f64).sqrt().ceil() as u32;
            let img = encode_layout_image(&scaled, width.max(1));
            let path = dir.join(format!("{i:03}.png"));
            img.save(&path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}

pub fn write_dataset(root: &Path, cfg: &ToyConfig) -> Result<()> {
    let classes: Vec<(String, Vec<f64>)> = species()
        .into_iter()
        .map(|s| s.class_id)
        .zip(class_means(cfg))
        .collect();
    write_layout_split(root, "train", &classes, cfg.train_per_class, cfg.noise, cfg.seed)?;
    write_layout_split(root, "test", &classes, cfg.test_per_class, cfg.noise, cfg.seed.wrapping_add(1))
}

const ANSWER_TEMPLATES: &[&str] = &[
    "it has {V} fur.",
    "it is {V}.",
    "its coat is {V}.",
    "it lives in the {H}.",
    "this big cat lives in the {H}.",
    "a {V} cat from the {H}.",
    "it hunts in the {H} at night.",
    "click to enlarge photo.",
    "a photo of a big cat.",
    "it hunts at night.",
    "it is a large wild cat.",
    "it is fast and strong.",
    "it has sharp teeth and long claws.",
    "people admire this cat.",
];

/// Class-agnostic answers: visual and habitat slots are filled at random, so
/// the reference model knows the words but not which class they belong to.
pub fn pretraining_corpus(bank: &PromptBank, n: usize, seed: u64) -> Result<Vec<PretrainExample>> {
    let sp = species();
    let questions = bank.get(QUESTIONS25)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let class = sp.choose(&mut rng).expect("species nonempty");
            let q = questions.templates().choose(&mut rng).expect("questions nonempty");
            let t = ANSWER_TEMPLATES.choose(&mut rng).expect("templates nonempty");
            let v = &sp[rng.gen_range(0..sp.len())].visual;
            let h = &sp[rng.gen_range(0..sp.len())].habitat;
            PretrainExample {
                prompt: q.render(&class.class_id),
                answer: t.replace("{V}", v).replace("{H}", h),
            }
        })
        .collect())
}

/// Vocabulary covering the questions, class names and answer templates.
pub fn tokenizer(bank: &PromptBank) -> Result<Tokenizer> {
    let sp = species();
    let mut texts: Vec<String> = Vec::new();
    for s in &sp {
        texts.extend(bank.render(QUESTIONS25, &s.class_id)?.into_iter().map(|(_, t)| t));
        texts.push(format!("{} {} {}", s.class_id, s.visual, s.habitat));
    }
    texts.extend(ANSWER_TEMPLATES.iter().map(|t| t.replace("{V}", "").replace("{H}", "")));
    Ok(Tokenizer::from_texts(texts.iter().map(String::as_str)))
}

/// The pretrained reference policy for the toy task.
pub fn reference_model(bank: &PromptBank, seed: u64) -> Result<TinyLm> {
    let mut lm = TinyLm::new(tokenizer(bank)?, TinyLmConfig { seed, ..TinyLmConfig::default() })?;
    let corpus = pretraining_corpus(bank, 1500, seed)?;
    pretrain(&mut lm, &corpus, &PretrainConfig { seed, ..PretrainConfig::default() })?;
    Ok(lm)
}
