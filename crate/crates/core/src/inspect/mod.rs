//! Two-stage inspection of generated descriptions (informative vs spurious,
//! then visual vs non-visual among the informative ones), attribute tagging,
//! breakdown fractions and judge–human agreement.

mod judge;

pub use judge::{
    categorize_all, extract_attributes, judge_informative, judge_visual, Check, ChatMessage,
    ChatTransport, Judge, JudgeClient, JudgeOutcome, JudgePrompts, OpenAiTransport, RetryPolicy,
    StubLexicon, TransportJudge, DEFAULT_JUDGE_MODEL,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Controlled attribute vocabulary. Free-form tags outside it are allowed.
pub const ATTRIBUTE_VOCABULARY: &[&str] = &[
    "color",
    "shape",
    "size",
    "parts",
    "pattern",
    "family/taxonomy",
    "habitat",
    "behavior",
    "usage",
    "origin",
    "other",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Informative {
    Yes,
    No,
    #[default]
    Unjudged,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Visual {
    Yes,
    No,
    NotApplicable,
    #[default]
    Unjudged,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanLabel {
    pub informative: Option<bool>,
    pub visual: Option<bool>,
}

/// A generated description and everything learned about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub description_id: String,
    pub class_id: String,
    pub question_id: String,
    pub text: String,
    pub reward: f64,
    #[serde(default)]
    pub informative: Informative,
    #[serde(default)]
    pub visual: Visual,
    #[serde(default)]
    pub attributes: BTreeSet<String>,
    #[serde(default)]
    pub judge_model_id: Option<String>,
    #[serde(default)]
    pub human_label: Option<HumanLabel>,
    /// Raw judge responses keyed by check name, kept for audit.
    #[serde(default)]
    pub raw_responses: BTreeMap<String, String>,
}

impl DescriptionRecord {
    pub fn new(
        description_id: impl Into<String>,
        class_id: impl Into<String>,
        question_id: impl Into<String>,
        text: impl Into<String>,
        reward: f64,
    ) -> Self {
        Self {
            description_id: description_id.into(),
            class_id: class_id.into(),
            question_id: question_id.into(),
            text: text.into(),
            reward,
            informative: Informative::Unjudged,
            visual: Visual::Unjudged,
            attributes: BTreeSet::new(),
            judge_model_id: None,
            human_label: None,
            raw_responses: BTreeMap::new(),
        }
    }

    /// Visual labels only make sense on informative records.
    pub fn is_consistent(&self) -> bool {
        !matches!(self.visual, Visual::Yes | Visual::No) || self.informative == Informative::Yes
    }

    /// True once no further judge call is needed for the two-stage labels.
    pub fn fully_judged(&self) -> bool {
        match self.informative {
            Informative::Unjudged => false,
            Informative::No => true,
            Informative::Yes => matches!(self.visual, Visual::Yes | Visual::No),
        }
    }
}

/// Counts and fractions over a set of records.
///
/// `spurious + visual + nonvisual + unjudged == total`, where `unjudged`
/// covers records missing either stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownReport {
    pub total: usize,
    pub informative: usize,
    pub spurious: usize,
    pub visual: usize,
    pub nonvisual: usize,
    pub unjudged: usize,
    /// informative / (informative + spurious); `None` when nothing was judged.
    pub informative_fraction: Option<f64>,
    /// visual / (visual + nonvisual); `None` when no informative record has
    /// a visual label.
    pub visual_fraction: Option<f64>,
    pub attribute_histogram: BTreeMap<String, usize>,
}

impl BreakdownReport {
    pub fn from_records(records: &[DescriptionRecord]) -> Self {
        let count = |f: &dyn Fn(&DescriptionRecord) -> bool| records.iter().filter(|r| f(r)).count();
        let informative = count(&|r| r.informative == Informative::Yes);
        let spurious = count(&|r| r.informative == Informative::No);
        let visual = count(&|r| r.informative == Informative::Yes && r.visual == Visual::Yes);
        let nonvisual = count(&|r| r.informative == Informative::Yes && r.visual == Visual::No);
        let total = records.len();
        let mut attribute_histogram = BTreeMap::new();
        for r in records {
            for a in &r.attributes {
                *attribute_histogram.entry(a.clone()).or_insert(0) += 1;
            }
        }
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        Self {
            total,
            informative,
            spurious,
            visual,
            nonvisual,
            unjudged: total - spurious - visual - nonvisual,
            informative_fraction: ratio(informative, informative + spurious),
            visual_fraction: ratio(visual, visual + nonvisual),
            attribute_histogram,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgreementCheck {
    Informative,
    Visual,
}

/// Percentage of records where the judge label matches the human label,
/// rounded to one decimal.
pub fn agreement(records: &[DescriptionRecord], check: AgreementCheck) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Evaluation("agreement needs at least one record".into()));
    }
    let mut matches = 0usize;
    for r in records {
        let human = r.human_label.as_ref().and_then(|h| match check {
            AgreementCheck::Informative => h.informative,
            AgreementCheck::Visual => h.visual,
        });
        let judge = match check {
            AgreementCheck::Informative => match r.informative {
                Informative::Yes => Some(true),
                Informative::No => Some(false),
                Informative::Unjudged => None,
            },
            AgreementCheck::Visual => match r.visual {
                Visual::Yes => Some(true),
                Visual::No => Some(false),
                _ => None,
            },
        };
        match (judge, human) {
            (Some(j), Some(h)) => matches += usize::from(j == h),
            _ => {
                return Err(Error::Precondition(format!(
                    "record {} lacks a judge or human {check:?} label",
                    r.description_id
                )))
            }
        }
    }
    Ok(percent_one_decimal(matches, records.len()))
}

/// `100 * num / den` rounded half-away-from-zero to one decimal.
pub fn percent_one_decimal(num: usize, den: usize) -> f64 {
    // integer arithmetic avoids binary rounding at the .x5 boundary
    let tenths = (2000 * num + den) / (2 * den);
    tenths as f64 / 10.0
}

/// Seeded uniform sample without replacement from each named stratum.
/// Strata smaller than `per_stratum` are taken whole with a warning.
pub fn sample_for_audit(
    strata: &[(String, Vec<DescriptionRecord>)],
    per_stratum: usize,
    seed: u64,
) -> (Vec<DescriptionRecord>, Vec<String>) {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (k, (name, records)) in strata.iter().enumerate() {
        if records.len() <= per_stratum {
            if records.len() < per_stratum {
                let msg = format!(
                    "stratum {name} has {} records, fewer than {per_stratum}; taking all",
                    records.len()
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            out.extend(records.iter().cloned());
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut picked = sample(&mut rng, records.len(), per_stratum).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| records[i].clone()));
    }
    (out, warnings)
}

/// Audit sheet in the human-override layout (label columns left blank for
/// the annotator), with class and text appended for context.
pub fn audit_csv(records: &[DescriptionRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["description_id", "informative", "visual", "attributes", "class_id", "text"])?;
    for r in records {
        w.write_record([r.description_id.as_str(), "", "", "", r.class_id.as_str(), r.text.as_str()])?;
    }
    crate::zeroshot::csv_string(w)
}

/// One row of a human-override CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanOverride {
    pub description_id: String,
    pub informative: Option<bool>,
    pub visual: Option<bool>,
    pub attributes: Vec<String>,
}

fn parse_flag(cell: &str, line: usize) -> Result<Option<bool>> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "" | "-" | "na" | "n/a" => Ok(None),
        "yes" | "y" | "true" | "1" => Ok(Some(true)),
        "no" | "n" | "false" | "0" => Ok(Some(false)),
        other => Err(Error::Input(format!("override row {line}: cannot read {other:?} as yes/no"))),
    }
}

/// Reads `description_id,informative,visual,attributes` rows; attributes are
/// `;`-separated.
pub fn load_human_overrides(path: &Path) -> Result<Vec<HumanOverride>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let cell = |k: usize| row.get(k).unwrap_or("");
        let id = cell(0);
        if id.is_empty() {
            return Err(Error::Input(format!("{}: row {} has no description_id", path.display(), i + 2)));
        }
        out.push(HumanOverride {
            description_id: id.to_string(),
            informative: parse_flag(cell(1), i + 2)?,
            visual: parse_flag(cell(2), i + 2)?,
            attributes: cell(3)
                .split(';')
                .map(|a| a.trim().to_lowercase())
                .filter(|a| !a.is_empty())
                .collect(),
        });
    }
    Ok(out)
}

/// Attaches human labels; non-empty override attributes replace the judged
/// ones. Returns ids that matched no record.
pub fn apply_overrides(records: &mut [DescriptionRecord], overrides: &[HumanOverride]) -> Vec<String> {
    let mut by_id: BTreeMap<&str, &HumanOverride> = BTreeMap::new();
    for o in overrides {
        by_id.insert(o.description_id.as_str(), o);
    }
    let mut used = BTreeSet::new();
    for r in records.iter_mut() {
        if let Some(o) = by_id.get(r.description_id.as_str()) {
            used.insert(o.description_id.clone());
            r.human_label = Some(HumanLabel {
                informative: o.informative,
                visual: o.visual,
            });
            if !o.attributes.is_empty() {
                r.attributes = o.attributes.iter().cloned().collect();
            }
        }
    }
    by_id.keys().filter(|k| !used.contains(**k)).map(|k| k.to_string()).collect()
}
