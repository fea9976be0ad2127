use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{AxisSpec, BackendRegistry, EmbeddingCache, HashProjection, KeywordAxis};
use crate::error::{Error, Result};
use crate::inspect::{JudgeClient, JudgePrompts, OpenAiTransport, RetryPolicy, TransportJudge, DEFAULT_JUDGE_MODEL};
use crate::kl::KlConfig;
use crate::prompts::{PromptBank, CUSTOM3, GENERIC80, QUESTIONS25};
use crate::reward::RewardConfig;
use crate::toy::{self, ToyConfig};
use crate::trainer::PpoConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Short name used in report tables; defaults to the root's last component.
    pub name: Option<String>,
    pub root: PathBuf,
    pub train_split: String,
    pub eval_split: String,
    /// Expected class directories; every subdirectory when absent.
    pub classes: Option<Vec<String>>,
    /// Cap on training images per class used for reward prototypes.
    pub max_images_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: None,
            root: PathBuf::from("data"),
            train_split: "train".into(),
            eval_split: "test".into(),
            classes: None,
            max_images_per_class: 64,
        }
    }
}

impl DatasetConfig {
    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.root
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendSpec {
    Hash {
        id: String,
        dimension: usize,
        #[serde(default)]
        seed: u64,
    },
    Keyword {
        id: String,
        dimension: usize,
        axes: Vec<AxisSpec>,
        #[serde(default = "default_residual")]
        residual_weight: f64,
        #[serde(default)]
        seed: u64,
    },
    /// The keyword-axis encoder of the built-in toy world.
    Toy {
        id: String,
        #[serde(default)]
        toy: ToyConfig,
    },
}

fn default_residual() -> f64 {
    0.5
}

impl BackendSpec {
    pub fn id(&self) -> &str {
        match self {
            BackendSpec::Hash { id, .. } | BackendSpec::Keyword { id, .. } | BackendSpec::Toy { id, .. } => id,
        }
    }

    pub fn register(&self, registry: &mut BackendRegistry) -> Result<()> {
        match self {
            BackendSpec::Hash { id, dimension, seed } => {
                registry.register(Arc::new(HashProjection::new(id, *dimension, *seed)?))
            }
            BackendSpec::Keyword { id, dimension, axes, residual_weight, seed } => registry.register(Arc::new(
                KeywordAxis::new(id, *dimension, axes.clone(), *residual_weight, *seed)?,
            )),
            BackendSpec::Toy { id, toy } => registry.register(Arc::new(toy::keyword_backend(id, toy)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "init", rename_all = "kebab-case")]
pub enum PolicyConfig {
    /// Pretrain the toy reference model.
    Toy {
        #[serde(default)]
        seed: u64,
    },
    /// Load a serialized model.
    Path { path: PathBuf },
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig::Toy { seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPromptSet {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub questions: String,
    pub baseline: String,
    pub probe: String,
    pub user_sets: Vec<UserPromptSet>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            questions: QUESTIONS25.into(),
            baseline: GENERIC80.into(),
            probe: CUSTOM3.into(),
            user_sets: Vec::new(),
        }
    }
}

impl PromptConfig {
    pub fn bank(&self) -> Result<PromptBank> {
        let mut bank = PromptBank::builtin();
        for s in &self.user_sets {
            bank.load_user_set(&s.path, Some(&s.name))?;
        }
        for name in [&self.questions, &self.baseline, &self.probe] {
            bank.get(name)?;
        }
        Ok(bank)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { max_new_tokens: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    /// Use the offline lexicon judge.
    pub stub: bool,
    pub model: String,
    pub endpoint: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub retry: RetryPolicy,
    pub prompts_path: Option<PathBuf>,
    pub extract_attributes: bool,
    /// CSV of human labels: description_id, informative, visual, attributes.
    pub overrides_path: Option<PathBuf>,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            stub: true,
            model: DEFAULT_JUDGE_MODEL.into(),
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            retry: RetryPolicy::default(),
            prompts_path: None,
            extract_attributes: true,
            overrides_path: None,
        }
    }
}

impl JudgeConfig {
    pub fn client(&self, offline: bool) -> Result<JudgeClient> {
        if offline || self.stub {
            return Ok(JudgeClient::stub());
        }
        let prompts = match &self.prompts_path {
            Some(p) => JudgePrompts::from_path(p)?,
            None => JudgePrompts::builtin(),
        };
        let transport = OpenAiTransport::from_env(
            self.endpoint.clone(),
            &self.api_key_env,
            Duration::from_secs(self.retry.timeout_secs.max(1)),
        )?;
        Ok(JudgeClient::new(
            Box::new(TransportJudge { transport, model: self.model.clone(), prompts }),
            self.retry.clone(),
        ))
    }
}

/// Everything one experiment needs. Relative paths are resolved against
/// the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Stub judge regardless of `judge.stub`.
    pub offline: bool,
    pub dataset: DatasetConfig,
    pub backends: Vec<BackendSpec>,
    /// Backend whose similarity is the alignment reward.
    pub reward_backend: String,
    /// Additional backends to evaluate the descriptions with.
    pub eval_backends: Vec<String>,
    pub cache_dir: Option<PathBuf>,
    pub policy: PolicyConfig,
    pub prompts: PromptConfig,
    pub ppo: PpoConfig,
    pub kl: KlConfig,
    pub reward: RewardConfig,
    pub generation: GenerationConfig,
    pub judge: JudgeConfig,
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment_id: "experiment".into(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            offline: false,
            dataset: DatasetConfig::default(),
            backends: Vec::new(),
            reward_backend: String::new(),
            eval_backends: Vec::new(),
            cache_dir: None,
            policy: PolicyConfig::default(),
            prompts: PromptConfig::default(),
            ppo: PpoConfig::default(),
            kl: KlConfig::default(),
            reward: RewardConfig::default(),
            generation: GenerationConfig::default(),
            judge: JudgeConfig::default(),
            checkpoint_every: 0,
        }
    }
}

/// Sets `dotted.path = value` in a TOML tree. The value is read as a TOML
/// literal when possible, otherwise as a bare string.
pub fn apply_override(tree: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = tree;
    for (i, key) in keys.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path}: {} is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            table.insert(key.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config(format!("override {assignment:?} has an empty key")))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Self = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads a config file, applies `key=value` overrides and resolves
    /// relative paths against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.dataset.root);
        if let Some(p) = &mut self.cache_dir {
            fix(p);
        }
        if let PolicyConfig::Path { path } = &mut self.policy {
            fix(path);
        }
        for s in &mut self.prompts.user_sets {
            fix(&mut s.path);
        }
        if let Some(p) = &mut self.judge.prompts_path {
            fix(p);
        }
        if let Some(p) = &mut self.judge.overrides_path {
            fix(p);
        }
    }

    /// Static consistency checks (no file system access).
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.experiment_id.is_empty()
            || !self.experiment_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return bad(format!("experiment_id {:?} must be non-empty [A-Za-z0-9._-]", self.experiment_id));
        }
        if self.backends.is_empty() {
            return bad("at least one backend is required".into());
        }
        let ids: Vec<&str> = self.backends.iter().map(BackendSpec::id).collect();
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return bad(format!("backend id {id} declared twice"));
            }
        }
        for b in std::iter::once(&self.reward_backend).chain(&self.eval_backends) {
            if !ids.contains(&b.as_str()) {
                return bad(format!("backend {b:?} is not declared in [[backends]]"));
            }
        }
        self.ppo.validate()?;
        self.reward.validate()?;
        if self.generation.max_new_tokens == 0 {
            return bad("generation.max_new_tokens must be positive".into());
        }
        Ok(())
    }

    /// Reward backend first, then the extra evaluation backends.
    pub fn evaluation_backends(&self) -> Vec<String> {
        let mut out = vec![self.reward_backend.clone()];
        for b in &self.eval_backends {
            if !out.contains(b) {
                out.push(b.clone());
            }
        }
        out
    }

    pub fn registry(&self) -> Result<BackendRegistry> {
        let mut reg = BackendRegistry::new();
        if let Some(dir) = &self.cache_dir {
            reg = reg.with_cache(EmbeddingCache::open(dir)?);
        }
        for b in &self.backends {
            b.register(&mut reg)?;
        }
        Ok(reg)
    }

    /// Hash of the canonical JSON snapshot; equal snapshots give equal
    /// outputs in the deterministic (synthetic + stub) mode.
    pub fn snapshot_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
