//! Report tables, recomputed from persisted descriptions and eval results.
//! Output is a pure function of the store contents: sorted keys, fixed
//! float formatting, no timestamps or absolute paths.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use super::store::{Store, ALIGN_DIR, CONFIG_FILE, EVAL_FILE};
use super::{EvalTables, ExperimentConfig};
use crate::dataset::DatasetSplit;
use crate::embedding::BackendRegistry;
use crate::error::{Error, Result};
use crate::inspect::{BreakdownReport, DescriptionRecord};
use crate::zeroshot::{cross_vlm_matrix, csv_string, subset_texts, CrossVlmMatrix, SubsetLabel};

/// Below this informative fraction an experiment is marked "almost solely
/// spurious".
pub const SPURIOUS_MARKER_THRESHOLD: f64 = 0.25;

/// Accuracy gain (in points) above which a subset counts as considerably
/// better.
const CONSIDERABLE_POINTS: f64 = 1.0;

/// Difference in percentage points rounded to one decimal, and whether
/// `aligned` beats `baseline`.
pub fn accuracy_delta(aligned: f64, baseline: f64) -> (f64, bool) {
    (((aligned - baseline) * 1000.0).round() / 10.0, aligned > baseline)
}

/// File name → contents.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReportBundle {
    pub files: BTreeMap<String, String>,
}

impl ReportBundle {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in &self.files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

struct Experiment {
    id: String,
    config: ExperimentConfig,
    descriptions: Vec<DescriptionRecord>,
    eval: EvalTables,
    kl_trace: Option<String>,
}

#[derive(Serialize)]
struct MainRow {
    dataset: String,
    experiment_id: String,
    backend: String,
    aligned: f64,
    generic80: f64,
    custom3: Option<f64>,
    delta_points: f64,
    success: bool,
}

#[derive(Serialize)]
struct FractionRow {
    dataset: String,
    experiment_id: String,
    backend: String,
    total: usize,
    informative: usize,
    spurious: usize,
    visual: usize,
    nonvisual: usize,
    unjudged: usize,
    informative_fraction: Option<f64>,
    visual_fraction: Option<f64>,
    almost_solely_spurious: bool,
}

fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

fn opt4(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), fmt4)
}

fn load(store: &Store, id: &str) -> Result<Experiment> {
    let config: ExperimentConfig = store.read_json(id, CONFIG_FILE)?;
    let eval_path = store.exp_dir(id).join(EVAL_FILE);
    if !eval_path.exists() {
        return Err(Error::Validation(format!("experiment {id} has not been evaluated")));
    }
    let trace_path = store.exp_dir(id).join(ALIGN_DIR).join("kl_trace.csv");
    Ok(Experiment {
        id: id.to_string(),
        eval: store.read_json(id, EVAL_FILE)?,
        descriptions: store.load_descriptions(id)?,
        kl_trace: if trace_path.exists() {
            Some(fs::read_to_string(&trace_path).map_err(|e| Error::io(&trace_path, e))?)
        } else {
            None
        },
        config,
    })
}

fn csv_table(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    csv_string(w)
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Builds every report table for the given (evaluated) experiments.
/// Experiments on different datasets share tables but are grouped by a
/// dataset column; cross-backend matrices are computed per dataset.
pub fn build_report(store: &Store, ids: &[String]) -> Result<ReportBundle> {
    if ids.is_empty() {
        return Err(Error::Input("report needs at least one experiment".into()));
    }
    let mut experiments: Vec<Experiment> = ids.iter().map(|id| load(store, id)).collect::<Result<_>>()?;
    experiments.sort_by(|a, b| (a.config.dataset.display_name(), &a.id).cmp(&(b.config.dataset.display_name(), &b.id)));
    experiments.dedup_by(|a, b| a.id == b.id);

    let mut bundle = ReportBundle::default();
    let mut main = Vec::new();
    let mut fractions = Vec::new();
    let mut subset_rows = Vec::new();
    let mut comparison_rows = Vec::new();
    let mut attribute_rows = Vec::new();
    let mut sankey = BTreeMap::new();

    for e in &experiments {
        let dataset = e.config.dataset.display_name();
        let backend = &e.config.reward_backend;
        let results = e.eval.get(backend).ok_or_else(|| {
            Error::Validation(format!("experiment {} has no results for backend {backend}", e.id))
        })?;
        let acc = |l: SubsetLabel| results.get(&l).map(|r| r.accuracy);
        let aligned = acc(SubsetLabel::All)
            .ok_or_else(|| Error::Validation(format!("experiment {}: no aligned accuracy", e.id)))?;
        let generic = acc(SubsetLabel::Generic80)
            .ok_or_else(|| Error::Validation(format!("experiment {}: no generic80 accuracy", e.id)))?;
        let (delta_points, success) = accuracy_delta(aligned, generic);
        main.push(MainRow {
            dataset: dataset.clone(),
            experiment_id: e.id.clone(),
            backend: backend.clone(),
            aligned,
            generic80: generic,
            custom3: acc(SubsetLabel::Custom3),
            delta_points,
            success,
        });

        let b = BreakdownReport::from_records(&e.descriptions);
        fractions.push(FractionRow {
            dataset: dataset.clone(),
            experiment_id: e.id.clone(),
            backend: backend.clone(),
            total: b.total,
            informative: b.informative,
            spurious: b.spurious,
            visual: b.visual,
            nonvisual: b.nonvisual,
            unjudged: b.unjudged,
            informative_fraction: b.informative_fraction,
            visual_fraction: b.visual_fraction,
            almost_solely_spurious: b.informative_fraction.is_some_and(|f| f < SPURIOUS_MARKER_THRESHOLD),
        });

        for (eval_backend, results) in &e.eval {
            for (label, r) in results {
                let fallback: Vec<&str> =
                    r.per_class.iter().filter(|c| c.fallback).map(|c| c.class_id.as_str()).collect();
                let n_desc: usize = r.per_class.iter().map(|c| c.description_count).sum();
                subset_rows.push(vec![
                    dataset.clone(),
                    e.id.clone(),
                    eval_backend.clone(),
                    label.to_string(),
                    r.correct.to_string(),
                    r.n_images.to_string(),
                    fmt4(r.accuracy),
                    n_desc.to_string(),
                    fallback.join(";"),
                ]);
            }
            for (a, bl) in [
                (SubsetLabel::Spurious, SubsetLabel::Informative),
                (SubsetLabel::Visual, SubsetLabel::Nonvisual),
                (SubsetLabel::All, SubsetLabel::Generic80),
                (SubsetLabel::All, SubsetLabel::Custom3),
            ] {
                if let (Some(ra), Some(rb)) = (results.get(&a), results.get(&bl)) {
                    let (d, _) = accuracy_delta(ra.accuracy, rb.accuracy);
                    comparison_rows.push(vec![
                        dataset.clone(),
                        e.id.clone(),
                        eval_backend.clone(),
                        a.to_string(),
                        bl.to_string(),
                        fmt4(ra.accuracy),
                        fmt4(rb.accuracy),
                        format!("{d:+.1}"),
                        (d > CONSIDERABLE_POINTS).to_string(),
                        (ra.any_fallback() || rb.any_fallback()).to_string(),
                    ]);
                }
            }
        }

        for (attr, n) in &b.attribute_histogram {
            attribute_rows.push(vec![dataset.clone(), e.id.clone(), attr.clone(), n.to_string()]);
        }
        sankey.insert(
            e.id.clone(),
            json!({
                "dataset": dataset,
                "nodes": ["total", "informative", "spurious", "visual", "nonvisual", "unjudged"],
                "links": [
                    {"source": "total", "target": "informative", "value": b.informative},
                    {"source": "total", "target": "spurious", "value": b.spurious},
                    {"source": "total", "target": "unjudged", "value": b.total - b.informative - b.spurious},
                    {"source": "informative", "target": "visual", "value": b.visual},
                    {"source": "informative", "target": "nonvisual", "value": b.nonvisual},
                    {"source": "informative", "target": "unjudged", "value": b.informative - b.visual - b.nonvisual},
                ],
                "total": b.total,
            }),
        );
        if let Some(trace) = &e.kl_trace {
            bundle.files.insert(format!("kl_trace_{}.csv", e.id), trace.clone());
        }
    }

    bundle.files.insert(
        "main_accuracy.csv".into(),
        csv_table(
            &["dataset", "experiment_id", "backend", "aligned", "generic80", "custom3", "delta_points", "success"],
            main.iter()
                .map(|r| {
                    vec![
                        r.dataset.clone(),
                        r.experiment_id.clone(),
                        r.backend.clone(),
                        fmt4(r.aligned),
                        fmt4(r.generic80),
                        opt4(r.custom3),
                        format!("{:+.1}", r.delta_points),
                        r.success.to_string(),
                    ]
                })
                .collect(),
        )?,
    );
    bundle.files.insert("main_accuracy.json".into(), pretty(&main)?);
    bundle.files.insert(
        "informative_fraction.csv".into(),
        csv_table(
            &["dataset", "experiment_id", "backend", "total", "informative", "spurious", "unjudged", "informative_fraction", "almost_solely_spurious"],
            fractions
                .iter()
                .map(|r| {
                    vec![
                        r.dataset.clone(),
                        r.experiment_id.clone(),
                        r.backend.clone(),
                        r.total.to_string(),
                        r.informative.to_string(),
                        r.spurious.to_string(),
                        r.unjudged.to_string(),
                        opt4(r.informative_fraction),
                        r.almost_solely_spurious.to_string(),
                    ]
                })
                .collect(),
        )?,
    );
    bundle.files.insert(
        "visual_fraction.csv".into(),
        csv_table(
            &["dataset", "experiment_id", "backend", "informative", "visual", "nonvisual", "visual_fraction"],
            fractions
                .iter()
                .map(|r| {
                    vec![
                        r.dataset.clone(),
                        r.experiment_id.clone(),
                        r.backend.clone(),
                        r.informative.to_string(),
                        r.visual.to_string(),
                        r.nonvisual.to_string(),
                        opt4(r.visual_fraction),
                    ]
                })
                .collect(),
        )?,
    );
    bundle.files.insert("breakdown.json".into(), pretty(&fractions)?);
    bundle.files.insert(
        "subset_accuracy.csv".into(),
        csv_table(
            &["dataset", "experiment_id", "eval_backend", "subset", "correct", "n_images", "accuracy", "descriptions", "fallback_classes"],
            subset_rows,
        )?,
    );
    bundle.files.insert(
        "subset_comparisons.csv".into(),
        csv_table(
            &["dataset", "experiment_id", "eval_backend", "subset", "versus", "accuracy", "versus_accuracy", "delta_points", "considerable", "fallback_used"],
            comparison_rows,
        )?,
    );
    bundle.files.insert(
        "attributes.csv".into(),
        csv_table(&["dataset", "experiment_id", "attribute", "count"], attribute_rows)?,
    );
    bundle.files.insert("sankey.json".into(), pretty(&sankey)?);

    let mut matrices = BTreeMap::new();
    let mut groups: BTreeMap<String, Vec<&Experiment>> = BTreeMap::new();
    for e in &experiments {
        groups.entry(e.config.dataset.display_name()).or_default().push(e);
    }
    for (dataset, group) in groups {
        let m = group_matrix(&group)?;
        bundle.files.insert(format!("cross_vlm_{dataset}.csv"), m.to_csv()?);
        matrices.insert(dataset, m);
    }
    bundle.files.insert("cross_vlm.json".into(), pretty(&matrices)?);
    Ok(bundle)
}

/// Cross-backend matrix for experiments sharing one dataset: columns are
/// the reward backends present, rows every backend any of them evaluates
/// with.
fn group_matrix(group: &[&Experiment]) -> Result<CrossVlmMatrix> {
    let first = group[0];
    let mut registry = BackendRegistry::new();
    let mut eval_backends: Vec<String> = Vec::new();
    let mut reward_backends: Vec<String> = Vec::new();
    let mut sets = BTreeMap::new();
    for e in group {
        for spec in &e.config.backends {
            if registry.get(spec.id()).is_err() {
                spec.register(&mut registry)?;
            }
        }
        for b in e.config.evaluation_backends() {
            if !eval_backends.contains(&b) {
                eval_backends.push(b);
            }
        }
        let rb = e.config.reward_backend.clone();
        if sets.contains_key(&rb) {
            log::warn!("several experiments aligned for {rb} on {}; using the first", e.config.dataset.display_name());
            continue;
        }
        reward_backends.push(rb.clone());
        sets.insert(rb, subset_texts(&e.descriptions, SubsetLabel::All));
    }
    eval_backends.sort();
    reward_backends.sort();
    let d = &first.config.dataset;
    let split = DatasetSplit::scan(&d.root, &d.eval_split, d.classes.as_deref())?;
    cross_vlm_matrix(&registry, &eval_backends, &reward_backends, &sets, &split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_and_flag() {
        assert_eq!(accuracy_delta(0.62, 0.55), (7.0, true));
        assert_eq!(accuracy_delta(0.55, 0.62), (-7.0, false));
        assert_eq!(accuracy_delta(0.5, 0.5), (0.0, false));
    }
}
