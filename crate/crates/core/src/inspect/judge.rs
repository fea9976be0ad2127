use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BreakdownReport, DescriptionRecord, Informative, Visual};
use crate::dataset::display_name;
use crate::error::{Error, Result};

pub const DEFAULT_JUDGE_MODEL: &str = "gpt-3.5-turbo-1106";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    Informative,
    Visual,
    Attributes,
}

impl Check {
    pub fn name(self) -> &'static str {
        match self {
            Check::Informative => "informative",
            Check::Visual => "visual",
            Check::Attributes => "attributes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Messages in, text out.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, model: &str, messages: &[ChatMessage]) -> Result<String>;
}

/// OpenAI-compatible `/chat/completions` endpoint.
pub struct OpenAiTransport {
    endpoint: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl OpenAiTransport {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            endpoint: endpoint.into(),
            api_key,
            http,
        })
    }

    /// Reads the API key from `key_var`; a missing variable is a config error.
    pub fn from_env(endpoint: impl Into<String>, key_var: &str, timeout: Duration) -> Result<Self> {
        let key = std::env::var(key_var)
            .map_err(|_| Error::Config(format!("judge credentials: environment variable {key_var} is not set")))?;
        Self::new(endpoint, Some(key), timeout)
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: ChatMessage,
}

impl ChatTransport for OpenAiTransport {
    fn complete(&self, model: &str, messages: &[ChatMessage]) -> Result<String> {
        let body = serde_json::json!({
            "model": model,
            "messages": messages,
            "temperature": 0,
        });
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Judge(format!("request failed: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Error::Judge(format!("endpoint returned {status}: {text}")));
        }
        let parsed: CompletionResponse = resp
            .json()
            .map_err(|e| Error::Judge(format!("malformed completion: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Judge("completion had no choices".into()))
    }
}

/// Judge prompt templates with `{CONCEPT}` and `{DESCRIPTION}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgePrompts {
    pub system: String,
    pub informative: String,
    pub visual: String,
    pub attributes: String,
}

impl JudgePrompts {
    pub fn builtin() -> Self {
        serde_json::from_str(include_str!("../../data/judge_prompts.json"))
            .expect("built-in judge prompts parse")
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Self = serde_json::from_str(&text)?;
        for (name, t) in [("informative", &p.informative), ("visual", &p.visual), ("attributes", &p.attributes)] {
            if !t.contains("{DESCRIPTION}") {
                return Err(Error::Config(format!("{}: {name} prompt lacks {{DESCRIPTION}}", path.display())));
            }
        }
        Ok(p)
    }

    pub fn render(&self, check: Check, concept: &str, description: &str) -> Vec<ChatMessage> {
        let template = match check {
            Check::Informative => &self.informative,
            Check::Visual => &self.visual,
            Check::Attributes => &self.attributes,
        };
        vec![
            ChatMessage { role: "system".into(), content: self.system.clone() },
            ChatMessage {
                role: "user".into(),
                content: template.replace("{CONCEPT}", concept).replace("{DESCRIPTION}", description),
            },
        ]
    }
}

/// Something that answers a check about one description with raw text.
pub trait Judge: Send + Sync {
    fn model_id(&self) -> &str;
    fn ask(&self, check: Check, concept: &str, description: &str) -> Result<String>;
}

/// A judge backed by a chat-completion transport.
pub struct TransportJudge<T: ChatTransport> {
    pub transport: T,
    pub model: String,
    pub prompts: JudgePrompts,
}

impl<T: ChatTransport> Judge for TransportJudge<T> {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn ask(&self, check: Check, concept: &str, description: &str) -> Result<String> {
        self.transport.complete(&self.model, &self.prompts.render(check, concept, description))
    }
}

/// Offline judge: answers are a pure function of the description's words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubLexicon {
    pub informative: BTreeSet<String>,
    pub visual: BTreeSet<String>,
    /// Attribute tag → trigger words.
    pub attributes: Vec<(String, BTreeSet<String>)>,
}

const VISUAL_TAGS: &[&str] = &["color", "shape", "size", "parts", "pattern"];

fn default_attribute_words() -> Vec<(&'static str, &'static [&'static str])> {
    vec![
        ("color", &[
            "red", "orange", "yellow", "green", "blue", "purple", "violet", "pink", "white", "black",
            "brown", "gray", "grey", "golden", "silver", "tan", "cream", "bright", "dark", "pale",
            "colorful", "colored", "colour", "color",
        ]),
        ("shape", &[
            "round", "oval", "slender", "elongated", "pointed", "curved", "flat", "triangular",
            "tubular", "cylindrical", "shape", "shaped",
        ]),
        ("size", &[
            "small", "large", "big", "tiny", "huge", "tall", "giant", "massive", "size", "sized",
        ]),
        ("parts", &[
            "petal", "wing", "leaf", "leaves", "stem", "tail", "beak", "bill", "crest", "fin", "fur",
            "coat", "feather", "plumage", "claw", "teeth", "tooth", "ear", "leg", "paw", "mane",
            "horn", "antler", "handle", "wheel", "blade", "shell", "bark", "root",
        ]),
        ("pattern", &[
            "striped", "stripe", "spotted", "spot", "speckled", "banded", "patterned", "pattern",
            "mottled", "checkered", "dotted",
        ]),
        ("family/taxonomy", &[
            "family", "genus", "species", "subspecies", "breed", "variety", "relative", "feline",
            "mammal",
        ]),
        ("habitat", &[
            "habitat", "lives", "found", "jungle", "savanna", "rainforest", "forest", "desert",
            "wetland", "marsh", "ocean", "river", "lake", "mountain", "grassland", "meadow",
            "tropical",
        ]),
        ("behavior", &[
            "hunt", "hunts", "hunting", "eats", "feeds", "migrates", "nocturnal", "night", "sings",
            "swims", "flies", "climbs", "prey", "solitary",
        ]),
        ("usage", &["used", "cooking", "tool", "medicinal", "ornamental", "cultivated"]),
        ("origin", &["native", "originates", "originated", "origin", "endemic"]),
    ]
}

fn word_set(words: &[&str]) -> BTreeSet<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn matches_any(words: &[String], lexicon: &BTreeSet<String>) -> bool {
    words.iter().any(|w| {
        lexicon.contains(w)
            || w.strip_suffix("es").is_some_and(|s| lexicon.contains(s))
            || w.strip_suffix('s').is_some_and(|s| lexicon.contains(s))
    })
}

impl Default for StubLexicon {
    /// Informative = any attribute word; visual = color, shape, size, parts
    /// or pattern words.
    fn default() -> Self {
        let attributes: Vec<(String, BTreeSet<String>)> = default_attribute_words()
            .into_iter()
            .map(|(tag, words)| (tag.to_string(), word_set(words)))
            .collect();
        let informative = attributes.iter().flat_map(|(_, w)| w.iter().cloned()).collect();
        let visual = attributes
            .iter()
            .filter(|(t, _)| VISUAL_TAGS.contains(&t.as_str()))
            .flat_map(|(_, w)| w.iter().cloned())
            .collect();
        Self { informative, visual, attributes }
    }
}

impl StubLexicon {
    /// Replaces the informative rule with "contains any of `words`".
    pub fn with_informative(mut self, words: &[&str]) -> Self {
        self.informative = word_set(words);
        self
    }

    pub fn with_visual(mut self, words: &[&str]) -> Self {
        self.visual = word_set(words);
        self
    }
}

impl Judge for StubLexicon {
    fn model_id(&self) -> &str {
        "stub-lexicon"
    }

    fn ask(&self, check: Check, _concept: &str, description: &str) -> Result<String> {
        let words = crate::embedding::word_tokens(description);
        let yes_no = |hit: bool| if hit { "Yes" } else { "No" }.to_string();
        Ok(match check {
            Check::Informative => yes_no(matches_any(&words, &self.informative)),
            Check::Visual => yes_no(matches_any(&words, &self.visual)),
            Check::Attributes => {
                let tags: Vec<&str> = self
                    .attributes
                    .iter()
                    .filter(|(_, lex)| matches_any(&words, lex))
                    .map(|(t, _)| t.as_str())
                    .collect();
                if tags.is_empty() {
                    "other".into()
                } else {
                    tags.join(", ")
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff_ms: 500,
            timeout_secs: 30,
        }
    }
}

/// A judge plus retry policy and a call counter.
pub struct JudgeClient {
    judge: Box<dyn Judge>,
    retry: RetryPolicy,
    calls: AtomicUsize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JudgeOutcome {
    Judged,
    /// The response was archived but did not start with yes/no.
    Unparseable,
    /// Every attempt failed; the record is left unjudged.
    Failed(String),
}

impl JudgeClient {
    pub fn new(judge: Box<dyn Judge>, retry: RetryPolicy) -> Self {
        Self {
            judge,
            retry,
            calls: AtomicUsize::new(0),
        }
    }

    /// Offline judge with the default lexicon.
    pub fn stub() -> Self {
        Self::new(Box::new(StubLexicon::default()), RetryPolicy::default())
    }

    pub fn model_id(&self) -> &str {
        self.judge.model_id()
    }

    /// Number of judge requests issued, retries included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn ask(&self, check: Check, concept: &str, description: &str) -> Result<String> {
        let attempts = self.retry.attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.retry.initial_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            self.calls.fetch_add(1, Ordering::Relaxed);
            match self.judge.ask(check, concept, description) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("judge attempt {} of {attempts} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Case-insensitive leading yes/no.
pub(crate) fn parse_yes_no(raw: &str) -> Option<bool> {
    let first: String = raw
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match first.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

fn parse_attributes(raw: &str) -> BTreeSet<String> {
    raw.split([',', ';', '\n'])
        .map(|t| t.trim().trim_matches(|c: char| c == '.' || c == '"' || c == '-').trim().to_lowercase())
        .filter(|t| !t.is_empty())
        .map(|t| match t.as_str() {
            "family" | "taxonomy" => "family/taxonomy".to_string(),
            _ => t,
        })
        .collect()
}

fn require_text(record: &DescriptionRecord) -> Result<()> {
    if record.text.trim().is_empty() {
        return Err(Error::Input(format!("record {} has empty text", record.description_id)));
    }
    Ok(())
}

fn require_informative(record: &DescriptionRecord, what: &str) -> Result<()> {
    if record.informative != Informative::Yes {
        return Err(Error::Precondition(format!(
            "{what} applies only to informative records; {} is {:?}",
            record.description_id, record.informative
        )));
    }
    Ok(())
}

fn ask_record(
    client: &JudgeClient,
    record: &mut DescriptionRecord,
    check: Check,
) -> std::result::Result<String, String> {
    match client.ask(check, &display_name(&record.class_id), &record.text) {
        Ok(raw) => {
            record.raw_responses.insert(check.name().to_string(), raw.clone());
            record.judge_model_id = Some(client.model_id().to_string());
            Ok(raw)
        }
        Err(e) => {
            log::error!("judge gave up on {} ({}): {e}", record.description_id, check.name());
            Err(e.to_string())
        }
    }
}

pub fn judge_informative(client: &JudgeClient, record: &mut DescriptionRecord) -> Result<JudgeOutcome> {
    require_text(record)?;
    let raw = match ask_record(client, record, Check::Informative) {
        Ok(raw) => raw,
        Err(e) => return Ok(JudgeOutcome::Failed(e)),
    };
    Ok(match parse_yes_no(&raw) {
        Some(true) => {
            record.informative = Informative::Yes;
            if record.visual == Visual::NotApplicable {
                record.visual = Visual::Unjudged;
            }
            JudgeOutcome::Judged
        }
        Some(false) => {
            record.informative = Informative::No;
            record.visual = Visual::NotApplicable;
            JudgeOutcome::Judged
        }
        None => {
            record.informative = Informative::Unjudged;
            record.visual = Visual::Unjudged;
            JudgeOutcome::Unparseable
        }
    })
}

pub fn judge_visual(client: &JudgeClient, record: &mut DescriptionRecord) -> Result<JudgeOutcome> {
    require_text(record)?;
    require_informative(record, "the visual check")?;
    let raw = match ask_record(client, record, Check::Visual) {
        Ok(raw) => raw,
        Err(e) => return Ok(JudgeOutcome::Failed(e)),
    };
    Ok(match parse_yes_no(&raw) {
        Some(v) => {
            record.visual = if v { Visual::Yes } else { Visual::No };
            JudgeOutcome::Judged
        }
        None => {
            record.visual = Visual::Unjudged;
            JudgeOutcome::Unparseable
        }
    })
}

pub fn extract_attributes(client: &JudgeClient, record: &mut DescriptionRecord) -> Result<JudgeOutcome> {
    require_text(record)?;
    require_informative(record, "attribute extraction")?;
    let raw = match ask_record(client, record, Check::Attributes) {
        Ok(raw) => raw,
        Err(e) => return Ok(JudgeOutcome::Failed(e)),
    };
    let tags = parse_attributes(&raw);
    if tags.is_empty() {
        return Ok(JudgeOutcome::Unparseable);
    }
    record.attributes = tags;
    Ok(JudgeOutcome::Judged)
}

/// Two-stage categorization. Records already carrying a label for a stage
/// are not re-sent, so an interrupted run can resume without repeating
/// calls. `after_each` sees every record once its stages are done (e.g. to
/// persist it).
pub fn categorize_all(
    client: &JudgeClient,
    records: &mut [DescriptionRecord],
    mut after_each: impl FnMut(&DescriptionRecord) -> Result<()>,
) -> Result<BreakdownReport> {
    if records.is_empty() {
        return Err(Error::Input("nothing to categorize".into()));
    }
    for record in records.iter_mut() {
        if record.fully_judged() {
            continue;
        }
        if record.informative == Informative::Unjudged {
            judge_informative(client, record)?;
        }
        if record.informative == Informative::Yes && !matches!(record.visual, Visual::Yes | Visual::No) {
            judge_visual(client, record)?;
        }
        after_each(record)?;
    }
    let report = BreakdownReport::from_records(records);
    if report.unjudged > 0 {
        log::warn!("{} of {} records remain unjudged", report.unjudged, report.total);
    }
    Ok(report)
}
