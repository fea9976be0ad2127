//! Prompt-ensemble zero-shot classification: per-class text embeddings
//! averaged over descriptions, argmax against image embeddings, subset
//! splits by judge label, and the cross-backend matrix.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSplit;
use crate::embedding::{build_prototype, BackendRegistry, EmbeddingVector};
use crate::error::{Error, Result};
use crate::inspect::{DescriptionRecord, Informative, Visual};
use crate::prompts::{PromptBank, FALLBACK_TEMPLATE, PLACEHOLDER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetLabel {
    All,
    Informative,
    Spurious,
    Visual,
    Nonvisual,
    Generic80,
    Custom3,
}

impl SubsetLabel {
    pub const SPLITS: [SubsetLabel; 5] = [
        SubsetLabel::All,
        SubsetLabel::Informative,
        SubsetLabel::Spurious,
        SubsetLabel::Visual,
        SubsetLabel::Nonvisual,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubsetLabel::All => "all",
            SubsetLabel::Informative => "informative",
            SubsetLabel::Spurious => "spurious",
            SubsetLabel::Visual => "visual",
            SubsetLabel::Nonvisual => "nonvisual",
            SubsetLabel::Generic80 => "generic80",
            SubsetLabel::Custom3 => "custom3",
        }
    }

    /// Whether a judged record belongs to this split.
    pub fn admits(self, r: &DescriptionRecord) -> bool {
        match self {
            SubsetLabel::All => true,
            SubsetLabel::Informative => r.informative == Informative::Yes,
            SubsetLabel::Spurious => r.informative == Informative::No,
            SubsetLabel::Visual => r.informative == Informative::Yes && r.visual == Visual::Yes,
            SubsetLabel::Nonvisual => r.informative == Informative::Yes && r.visual == Visual::No,
            SubsetLabel::Generic80 | SubsetLabel::Custom3 => false,
        }
    }
}

impl fmt::Display for SubsetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The descriptions used to represent one class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDescriptions {
    pub class_id: String,
    /// Substituted into the fallback template.
    pub name: String,
    pub texts: Vec<String>,
}

/// Unit ensemble embedding per class, in class order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbeddingTable {
    pub backend_id: String,
    pub class_ids: Vec<String>,
    pub rows: Vec<EmbeddingVector>,
    pub description_counts: Vec<usize>,
    pub fallback: Vec<bool>,
}

/// Encodes each class's descriptions, averages the unit embeddings (in a
/// canonical order) and re-normalizes. Classes without descriptions get the
/// fallback template and a flag.
pub fn build_class_embeddings(
    registry: &BackendRegistry,
    backend_id: &str,
    classes: &[ClassDescriptions],
) -> Result<ClassEmbeddingTable> {
    if classes.is_empty() || classes.iter().all(|c| c.texts.is_empty()) {
        return Err(Error::Evaluation("every class has an empty description list".into()));
    }
    let mut table = ClassEmbeddingTable {
        backend_id: backend_id.to_string(),
        class_ids: Vec::with_capacity(classes.len()),
        rows: Vec::with_capacity(classes.len()),
        description_counts: Vec::with_capacity(classes.len()),
        fallback: Vec::with_capacity(classes.len()),
    };
    for c in classes {
        let fallback = c.texts.is_empty();
        let texts = if fallback {
            vec![FALLBACK_TEMPLATE.replacen(PLACEHOLDER, &c.name, 1)]
        } else {
            c.texts.clone()
        };
        let embeddings = registry.encode_text(backend_id, &texts)?;
        let row = if embeddings.windows(2).all(|w| w[0] == w[1]) {
            // already unit; skip a re-normalization that could move the last bit
            embeddings[0].clone()
        } else {
            let mean = build_prototype(&c.class_id, &embeddings)?;
            EmbeddingVector::normalized(mean.vector).map_err(|_| {
                Error::Evaluation(format!("class {}: description embeddings cancel out", c.class_id))
            })?
        };
        table.class_ids.push(c.class_id.clone());
        table.rows.push(row);
        table.description_counts.push(c.texts.len());
        table.fallback.push(fallback);
    }
    Ok(table)
}

/// Index of the best-scoring class per image; ties go to the lowest index.
pub fn classify(images: &[EmbeddingVector], table: &ClassEmbeddingTable) -> Result<Vec<usize>> {
    classify_rows(images, &table.rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>())
}

/// `classify` against arbitrary (not necessarily unit) class rows.
pub fn classify_rows(images: &[EmbeddingVector], rows: &[&[f64]]) -> Result<Vec<usize>> {
    if rows.is_empty() {
        return Err(Error::Input("no class rows to classify against".into()));
    }
    let d = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::Input(format!("class rows have dimensions {d} and {}", r.len())));
    }
    if let Some(e) = images.iter().find(|e| e.dim() != d) {
        return Err(Error::Input(format!("image dimension {} does not match class dimension {d}", e.dim())));
    }
    Ok(images
        .iter()
        .map(|img| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (k, row) in rows.iter().enumerate() {
                let s = img.dot(row);
                if s > best_score {
                    best = k;
                    best_score = s;
                }
            }
            best
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_id: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub description_count: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub backend_id: String,
    pub subset_label: SubsetLabel,
    pub correct: usize,
    pub n_images: usize,
    /// `correct / n_images`.
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
}

impl EvalResult {
    pub fn any_fallback(&self) -> bool {
        self.per_class.iter().any(|c| c.fallback)
    }
}

/// Encoded images of a split with their class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSplit {
    pub class_ids: Vec<String>,
    pub names: Vec<String>,
    pub embeddings: Vec<EmbeddingVector>,
    pub labels: Vec<usize>,
}

pub fn encode_split(registry: &BackendRegistry, backend_id: &str, split: &DatasetSplit) -> Result<EncodedSplit> {
    let (paths, labels) = split.labeled_images();
    if paths.is_empty() {
        return Err(Error::Input(format!("split {} has no images", split.split)));
    }
    Ok(EncodedSplit {
        class_ids: split.class_ids(),
        names: split.classes.iter().map(|c| c.name.clone()).collect(),
        embeddings: registry.encode_images(backend_id, &paths)?,
        labels,
    })
}

/// Description lists in split class order; classes absent from `texts`
/// get an empty list (and hence the fallback).
pub fn descriptions_for(encoded: &EncodedSplit, texts: &BTreeMap<String, Vec<String>>) -> Vec<ClassDescriptions> {
    encoded
        .class_ids
        .iter()
        .zip(&encoded.names)
        .map(|(id, name)| ClassDescriptions {
            class_id: id.clone(),
            name: name.clone(),
            texts: texts.get(id).cloned().unwrap_or_default(),
        })
        .collect()
}

/// Scores a table against already-encoded images.
pub fn evaluate_encoded(
    encoded: &EncodedSplit,
    table: &ClassEmbeddingTable,
    subset_label: SubsetLabel,
) -> Result<EvalResult> {
    if table.class_ids != encoded.class_ids {
        return Err(Error::Input("class order of table and split differ".into()));
    }
    let predictions = classify(&encoded.embeddings, table)?;
    let k = encoded.class_ids.len();
    let (mut correct, mut total) = (vec![0usize; k], vec![0usize; k]);
    for (p, &y) in predictions.iter().zip(&encoded.labels) {
        total[y] += 1;
        correct[y] += usize::from(*p == y);
    }
    let n_correct: usize = correct.iter().sum();
    let n = encoded.labels.len();
    Ok(EvalResult {
        backend_id: table.backend_id.clone(),
        subset_label,
        correct: n_correct,
        n_images: n,
        accuracy: n_correct as f64 / n as f64,
        per_class: (0..k)
            .map(|i| ClassAccuracy {
                class_id: table.class_ids[i].clone(),
                correct: correct[i],
                total: total[i],
                accuracy: if total[i] == 0 { 0.0 } else { correct[i] as f64 / total[i] as f64 },
                description_count: table.description_counts[i],
                fallback: table.fallback[i],
            })
            .collect(),
    })
}

/// Zero-shot accuracy on a split with the given descriptions per class id.
pub fn evaluate(
    registry: &BackendRegistry,
    backend_id: &str,
    split: &DatasetSplit,
    texts: &BTreeMap<String, Vec<String>>,
    subset_label: SubsetLabel,
) -> Result<EvalResult> {
    let encoded = encode_split(registry, backend_id, split)?;
    let table = build_class_embeddings(registry, backend_id, &descriptions_for(&encoded, texts))?;
    evaluate_encoded(&encoded, &table, subset_label)
}

/// Non-blank description texts per class admitted by `label`.
pub fn subset_texts(records: &[DescriptionRecord], label: SubsetLabel) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in records.iter().filter(|r| label.admits(r) && !r.text.trim().is_empty()) {
        out.entry(r.class_id.clone()).or_default().push(r.text.clone());
    }
    out
}

/// `evaluate` on each of the five record splits, encoding images once.
pub fn evaluate_subsets(
    registry: &BackendRegistry,
    backend_id: &str,
    split: &DatasetSplit,
    records: &[DescriptionRecord],
) -> Result<BTreeMap<SubsetLabel, EvalResult>> {
    let encoded = encode_split(registry, backend_id, split)?;
    let mut out = BTreeMap::new();
    for label in SubsetLabel::SPLITS {
        let descs = descriptions_for(&encoded, &subset_texts(records, label));
        let table = if descs.iter().all(|c| c.texts.is_empty()) {
            // nothing in this split at all: fallback for every class
            fallback_table(registry, backend_id, &descs)?
        } else {
            build_class_embeddings(registry, backend_id, &descs)?
        };
        out.insert(label, evaluate_encoded(&encoded, &table, label)?);
    }
    Ok(out)
}

fn fallback_table(
    registry: &BackendRegistry,
    backend_id: &str,
    classes: &[ClassDescriptions],
) -> Result<ClassEmbeddingTable> {
    let templated: Vec<ClassDescriptions> = classes
        .iter()
        .map(|c| ClassDescriptions {
            texts: vec![FALLBACK_TEMPLATE.replacen(PLACEHOLDER, &c.name, 1)],
            ..c.clone()
        })
        .collect();
    let mut table = build_class_embeddings(registry, backend_id, &templated)?;
    table.description_counts = vec![0; classes.len()];
    table.fallback = vec![true; classes.len()];
    Ok(table)
}

/// Baseline accuracy with a template set (e.g. generic80) rendered per class.
pub fn evaluate_template_set(
    registry: &BackendRegistry,
    backend_id: &str,
    split: &DatasetSplit,
    bank: &PromptBank,
    set_name: &str,
    label: SubsetLabel,
) -> Result<EvalResult> {
    let encoded = encode_split(registry, backend_id, split)?;
    let mut texts = BTreeMap::new();
    for (id, name) in encoded.class_ids.iter().zip(&encoded.names) {
        let rendered: Vec<String> = bank.render(set_name, name)?.into_iter().map(|(_, t)| t).collect();
        texts.insert(id.clone(), rendered);
    }
    let table = build_class_embeddings(registry, backend_id, &descriptions_for(&encoded, &texts))?;
    evaluate_encoded(&encoded, &table, label)
}

/// Rows: evaluation backends. Columns: the backend whose reward the
/// descriptions were aligned to. Missing description sets are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossVlmMatrix {
    pub eval_backends: Vec<String>,
    pub reward_backends: Vec<String>,
    pub accuracy: Vec<Vec<Option<f64>>>,
}

impl CrossVlmMatrix {
    pub fn get(&self, eval_backend: &str, reward_backend: &str) -> Option<f64> {
        let i = self.eval_backends.iter().position(|b| b == eval_backend)?;
        let j = self.reward_backends.iter().position(|b| b == reward_backend)?;
        self.accuracy[i][j]
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["eval_backend".to_string()];
        header.extend(self.reward_backends.iter().cloned());
        w.write_record(&header)?;
        for (b, row) in self.eval_backends.iter().zip(&self.accuracy) {
            let mut line = vec![b.clone()];
            line.extend(row.iter().map(|a| a.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"))));
            w.write_record(&line)?;
        }
        csv_string(w)
    }
}

/// Entry (i, j) evaluates `eval_backends[i]` on the descriptions aligned for
/// `reward_backends[j]`.
pub fn cross_vlm_matrix(
    registry: &BackendRegistry,
    eval_backends: &[String],
    reward_backends: &[String],
    description_sets: &BTreeMap<String, BTreeMap<String, Vec<String>>>,
    split: &DatasetSplit,
) -> Result<CrossVlmMatrix> {
    let mut accuracy = Vec::with_capacity(eval_backends.len());
    for eb in eval_backends {
        let encoded = encode_split(registry, eb, split)?;
        let mut row = Vec::with_capacity(reward_backends.len());
        for rb in reward_backends {
            let entry = match description_sets.get(rb) {
                None => {
                    log::warn!("no descriptions aligned for {rb}; cross-matrix entry ({eb}, {rb}) absent");
                    None
                }
                Some(texts) => {
                    let table = build_class_embeddings(registry, eb, &descriptions_for(&encoded, texts))?;
                    Some(evaluate_encoded(&encoded, &table, SubsetLabel::All)?.accuracy)
                }
            };
            row.push(entry);
        }
        accuracy.push(row);
    }
    Ok(CrossVlmMatrix {
        eval_backends: eval_backends.to_vec(),
        reward_backends: reward_backends.to_vec(),
        accuracy,
    })
}

pub(crate) fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Evaluation(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One CSV row per result.
pub fn eval_results_csv<'a>(results: impl IntoIterator<Item = &'a EvalResult>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["backend_id", "subset", "correct", "n_images", "accuracy", "fallback_classes"])?;
    for r in results {
        let fallback: Vec<&str> = r
            .per_class
            .iter()
            .filter(|c| c.fallback)
            .map(|c| c.class_id.as_str())
            .collect();
        w.write_record([
            r.backend_id.clone(),
            r.subset_label.to_string(),
            r.correct.to_string(),
            r.n_images.to_string(),
            format!("{:.6}", r.accuracy),
            fallback.join(";"),
        ])?;
    }
    csv_string(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{AxisSpec, HashProjection, KeywordAxis};
    use std::sync::Arc;

    fn unit(v: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector::normalized(v).unwrap()
    }

    fn table(rows: Vec<Vec<f64>>) -> ClassEmbeddingTable {
        let n = rows.len();
        ClassEmbeddingTable {
            backend_id: "t".into(),
            class_ids: (0..n).map(|i| format!("c{i}")).collect(),
            rows: rows.into_iter().map(unit).collect(),
            description_counts: vec![1; n],
            fallback: vec![false; n],
        }
    }

    fn hash_registry(dim: usize) -> BackendRegistry {
        let mut reg = BackendRegistry::new();
        reg.register(Arc::new(HashProjection::new("h", dim, 3).unwrap())).unwrap();
        reg
    }

    fn descs(texts: &[&str]) -> Vec<ClassDescriptions> {
        vec![ClassDescriptions {
            class_id: "c".into(),
            name: "cat".into(),
            texts: texts.iter().map(|s| s.to_string()).collect(),
        }]
    }

    #[test]
    fn orthogonal_rows() {
        let t = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(classify(&[unit(vec![1.0, 0.0])], &t).unwrap(), vec![0]);
        // exact tie goes to the lowest index
        assert_eq!(classify(&[unit(vec![1.0, 1.0])], &t).unwrap(), vec![0]);
        assert!(classify(&[unit(vec![1.0, 0.0, 0.0])], &t).is_err());
    }

    #[test]
    fn single_description_row_is_its_embedding() {
        let reg = hash_registry(16);
        let t = build_class_embeddings(&reg, "h", &descs(&["striped fur"])).unwrap();
        let e = reg.encode_text("h", &["striped fur"]).unwrap();
        assert_eq!(t.rows[0], e[0]);
        let twice = build_class_embeddings(&reg, "h", &descs(&["striped fur", "striped fur"])).unwrap();
        assert_eq!(twice.rows, t.rows);
    }

    #[test]
    fn ensemble_matches_independent_loop() {
        let reg = hash_registry(16);
        let texts = ["a red bird", "long tail", "sings at dawn", "found near lakes", "small beak"];
        let t = build_class_embeddings(&reg, "h", &descs(&texts)).unwrap();
        let mut acc = [0.0f64; 16];
        for s in texts {
            let e = reg.encode_text("h", &[s]).unwrap().remove(0);
            for (a, v) in acc.iter_mut().zip(e.as_slice()) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, r) in acc.iter().zip(t.rows[0].as_slice()) {
            assert!((a / norm - r).abs() < 1e-9);
        }
    }

    #[test]
    fn order_insensitive_table() {
        let reg = hash_registry(16);
        let a = build_class_embeddings(&reg, "h", &descs(&["one", "two", "three"])).unwrap();
        let b = build_class_embeddings(&reg, "h", &descs(&["three", "one", "two"])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_classes() {
        let reg = hash_registry(8);
        assert!(matches!(build_class_embeddings(&reg, "h", &descs(&[])), Err(Error::Evaluation(_))));
        let mut two = descs(&["x"]);
        two.push(ClassDescriptions { class_id: "d".into(), name: "dog".into(), texts: vec![] });
        let t = build_class_embeddings(&reg, "h", &two).unwrap();
        assert_eq!(t.fallback, vec![false, true]);
        assert_eq!(t.description_counts, vec![1, 0]);
        let fb = reg.encode_text("h", &["A photo of a dog."]).unwrap();
        assert_eq!(t.rows[1], fb[0]);
    }

    #[test]
    fn matrix_csv_marks_absent() {
        let m = CrossVlmMatrix {
            eval_backends: vec!["a".into()],
            reward_backends: vec!["a".into(), "b".into()],
            accuracy: vec![vec![Some(0.5), None]],
        };
        assert_eq!(m.to_csv().unwrap(), "eval_backend,a,b\na,0.5000,absent\n");
        assert_eq!(m.get("a", "b"), None);
    }

    #[test]
    fn keyword_backend_fixture_is_separable() {
        let axes = vec![
            AxisSpec { name: "red".into(), keywords: vec!["red".into()], weight: 1.0 },
            AxisSpec { name: "blue".into(), keywords: vec!["blue".into()], weight: 1.0 },
        ];
        let mut reg = BackendRegistry::new();
        reg.register(Arc::new(KeywordAxis::new("k", 8, axes, 0.1, 1).unwrap())).unwrap();
        let t = build_class_embeddings(
            &reg,
            "k",
            &[
                ClassDescriptions { class_id: "r".into(), name: "r".into(), texts: vec!["red".into()] },
                ClassDescriptions { class_id: "b".into(), name: "b".into(), texts: vec!["blue".into()] },
            ],
        )
        .unwrap();
        let mut e0 = vec![0.0; 8];
        e0[0] = 1.0;
        e0[3] = 0.05;
        let mut e1 = vec![0.0; 8];
        e1[1] = 1.0;
        e1[5] = -0.05;
        assert_eq!(classify(&[unit(e0), unit(e1)], &t).unwrap(), vec![0, 1]);
    }
}
