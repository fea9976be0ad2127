//! Prompt template sets: the concept questions fed to the language model, the
//! generic zero-shot baseline, and the photo-credit style probe templates.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{CONCEPT}";
pub const QUESTIONS25: &str = "questions25";
pub const GENERIC80: &str = "generic80";
pub const CUSTOM3: &str = "custom3";

/// Fallback template for classes that end up with no descriptions.
pub const FALLBACK_TEMPLATE: &str = "A photo of a {CONCEPT}.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(rename = "id")]
    pub template_id: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn render(&self, class_name: &str) -> String {
        self.text.replacen(PLACEHOLDER, class_name, 1)
    }
}

/// A validated, ordered set of templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    name: String,
    templates: Vec<PromptTemplate>,
}

impl PromptSet {
    pub fn new(name: impl Into<String>, templates: Vec<PromptTemplate>) -> Result<Self> {
        let name = name.into();
        let mut seen = std::collections::HashSet::new();
        for t in &templates {
            let count = t.text.matches(PLACEHOLDER).count();
            if count != 1 {
                return Err(Error::Validation(format!(
                    "template {} in set {name} has {count} {PLACEHOLDER} placeholders, expected 1",
                    t.template_id
                )));
            }
            if !seen.insert(t.template_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate template id {} in set {name}",
                    t.template_id
                )));
            }
        }
        if templates.is_empty() {
            return Err(Error::Validation(format!("prompt set {name} is empty")));
        }
        Ok(Self { name, templates })
    }

    pub fn from_json(name: impl Into<String>, json: &str) -> Result<Self> {
        Self::new(name, serde_json::from_str(json)?)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn render(&self, class_name: &str) -> Vec<(String, String)> {
        self.templates
            .iter()
            .map(|t| (t.template_id.clone(), t.render(class_name)))
            .collect()
    }
}

/// Registry of prompt sets. Immutable once loading is done.
#[derive(Debug, Clone)]
pub struct PromptBank {
    sets: BTreeMap<String, PromptSet>,
}

impl Default for PromptBank {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptBank {
    pub fn builtin() -> Self {
        let mut sets = BTreeMap::new();
        for (name, json) in [
            (QUESTIONS25, include_str!("../data/questions25.json")),
            (GENERIC80, include_str!("../data/generic80.json")),
            (CUSTOM3, include_str!("../data/custom3.json")),
        ] {
            let set = PromptSet::from_json(name, json).expect("built-in prompt sets are valid");
            sets.insert(name.to_string(), set);
        }
        Self { sets }
    }

    pub fn get(&self, set_name: &str) -> Result<&PromptSet> {
        self.sets
            .get(set_name)
            .ok_or_else(|| Error::Config(format!("unknown prompt set {set_name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(String::as_str)
    }

    pub fn render(&self, set_name: &str, class_name: &str) -> Result<Vec<(String, String)>> {
        if class_name.trim().is_empty() {
            return Err(Error::Input("class name is empty".into()));
        }
        Ok(self.get(set_name)?.render(class_name))
    }

    /// Loads a JSON template list and registers it under `name`, or under the
    /// file stem when `name` is `None`. A built-in set of the same name is
    /// replaced.
    pub fn load_user_set(&mut self, path: &Path, name: Option<&str>) -> Result<String> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = match name {
            Some(n) => n.to_string(),
            None => path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Config(format!("cannot name set from {}", path.display())))?
                .to_string(),
        };
        let set = PromptSet::from_json(name.clone(), &text)?;
        self.sets.insert(name.clone(), set);
        Ok(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn builtin_sizes() {
        let bank = PromptBank::builtin();
        assert_eq!(bank.get(QUESTIONS25).unwrap().len(), 25);
        assert_eq!(bank.get(GENERIC80).unwrap().len(), 80);
        assert_eq!(bank.get(CUSTOM3).unwrap().len(), 3);
    }

    #[test]
    fn questions_mention_the_class() {
        let out = PromptBank::builtin().render(QUESTIONS25, "painted bunting").unwrap();
        assert_eq!(out.len(), 25);
        assert!(out.iter().all(|(_, s)| s.contains("painted bunting")));
    }

    #[test]
    fn custom_set_leads_with_click_to_enlarge() {
        let out = PromptBank::builtin().render(CUSTOM3, "beagle").unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|(_, s)| s.contains("beagle")));
        assert!(out[0].1.starts_with("Click to enlarge image of"));
    }

    #[test]
    fn substitution() {
        let t = PromptTemplate { template_id: "x".into(), text: "A photo of a {CONCEPT}.".into() };
        assert_eq!(t.render("pug"), "A photo of a pug.");
    }

    #[test]
    fn unknown_set_and_empty_class() {
        let bank = PromptBank::builtin();
        assert!(matches!(bank.render("nope", "pug"), Err(Error::Config(_))));
        assert!(matches!(bank.render(GENERIC80, " "), Err(Error::Input(_))));
    }

    #[test]
    fn validation_errors_name_the_template() {
        let bad = vec![PromptTemplate { template_id: "t7".into(), text: "no slot".into() }];
        let err = PromptSet::new("u", bad).unwrap_err().to_string();
        assert!(err.contains("t7"), "{err}");
        let dup = vec![
            PromptTemplate { template_id: "a".into(), text: "{CONCEPT}".into() },
            PromptTemplate { template_id: "a".into(), text: "x {CONCEPT}".into() },
        ];
        assert!(PromptSet::new("u", dup).is_err());
        let twice = vec![PromptTemplate { template_id: "a".into(), text: "{CONCEPT} {CONCEPT}".into() }];
        assert!(PromptSet::new("u", twice).is_err());
    }

    #[test]
    fn user_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mine.json");
        let raw = r#"[{"id": "a", "text": "{CONCEPT} in the wild."}, {"id": "b", "text": "Close-up of a {CONCEPT}"}]"#;
        std::fs::File::create(&path).unwrap().write_all(raw.as_bytes()).unwrap();
        let mut bank = PromptBank::builtin();
        let name = bank.load_user_set(&path, None).unwrap();
        assert_eq!(name, "mine");
        let rendered = bank.render("mine", "snow leopard").unwrap();
        let parsed: Vec<serde_json::Value> = serde_json::from_str(raw).unwrap();
        let manual: Vec<(String, String)> = parsed
            .iter()
            .map(|o| {
                let text = o["text"].as_str().unwrap();
                let at = text.find("{CONCEPT}").unwrap();
                let mut s = String::from(&text[..at]);
                s.push_str("snow leopard");
                s.push_str(&text[at + "{CONCEPT}".len()..]);
                (o["id"].as_str().unwrap().to_string(), s)
            })
            .collect();
        assert_eq!(rendered, manual);
    }

    #[test]
    fn renders_differ_only_at_placeholder() {
        let bank = PromptBank::builtin();
        let a = bank.render(QUESTIONS25, "AAAA").unwrap();
        let b = bank.render(QUESTIONS25, "BBBB").unwrap();
        for ((_, x), (_, y)) in a.iter().zip(&b) {
            assert_eq!(x.replace("AAAA", "#"), y.replace("BBBB", "#"));
        }
    }
}
