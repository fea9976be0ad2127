//! Experiment pipeline: validate → align → generate → judge → evaluate →
//! report, with a resumable on-disk store and deterministic reports.

mod config;
mod report;
mod store;

pub use config::{
    apply_override, BackendSpec, DatasetConfig, ExperimentConfig, GenerationConfig, JudgeConfig, PolicyConfig,
    PromptConfig, UserPromptSet,
};
pub use report::{accuracy_delta, build_report, ReportBundle, SPURIOUS_MARKER_THRESHOLD};
pub use store::{IndexEntry, Status, Store, WriterLock};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSplit;
use crate::embedding::{build_prototype, BackendRegistry, ClassPrototype};
use crate::error::{Error, Result};
use crate::inspect::{
    apply_overrides, categorize_all, extract_attributes, load_human_overrides, BreakdownReport, Check,
    DescriptionRecord, Informative, JudgeClient, Visual,
};
use crate::lm::TinyLm;
use crate::prompts::PromptBank;
use crate::reward::score_description;
use crate::toy;
use crate::trainer::{align, AlignConfig, Checkpoint, PromptSample, SimilarityRewarder, TrainingLog};
use crate::zeroshot::{evaluate_subsets, evaluate_template_set, EvalResult, SubsetLabel};

/// Evaluation results per backend, then per subset.
pub type EvalTables = BTreeMap<String, BTreeMap<SubsetLabel, EvalResult>>;

pub const REFERENCE_POLICY_FILE: &str = "reference_policy.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Align,
    Generate,
    Judge,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Align, Stage::Generate, Stage::Judge, Stage::Evaluate, Stage::Report];

    /// Status the record must have reached before this stage can run.
    pub fn requires(self) -> Status {
        match self {
            Stage::Align | Stage::Generate => Status::Validated,
            Stage::Judge => Status::Generated,
            Stage::Evaluate => Status::Judged,
            Stage::Report => Status::Evaluated,
        }
    }

    pub fn completes(self) -> Status {
        match self {
            Stage::Align => Status::Aligned,
            Stage::Generate => Status::Generated,
            Stage::Judge => Status::Judged,
            Stage::Evaluate => Status::Evaluated,
            Stage::Report => Status::Reported,
        }
    }

    /// Parses a comma-separated stage list, e.g. `align,generate`.
    pub fn parse_list(s: &str) -> Result<Vec<Stage>> {
        let mut out: Vec<Stage> = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(Stage::from_str)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "align" => Ok(Stage::Align),
            "generate" => Ok(Stage::Generate),
            "judge" => Ok(Stage::Judge),
            "evaluate" => Ok(Stage::Evaluate),
            "report" => Ok(Stage::Report),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
    pub status: Status,
    pub training_log: Option<PathBuf>,
    pub descriptions: PathBuf,
    pub eval: Option<EvalTables>,
    pub breakdown: Option<BreakdownReport>,
}

/// Class list and image counts found by validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub classes: Vec<String>,
    pub train_counts: Vec<usize>,
    pub eval_counts: Vec<usize>,
    pub backends: Vec<String>,
    pub prompt_sets: Vec<String>,
}

/// One experiment bound to its store, backends and prompt bank.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub store: Store,
    pub registry: BackendRegistry,
    pub bank: PromptBank,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.check()?;
        let registry = config.registry()?;
        let bank = config.prompts.bank()?;
        let store = Store::open(&config.output_dir)?;
        Ok(Self { config, store, registry, bank })
    }

    fn id(&self) -> &str {
        &self.config.experiment_id
    }

    fn dir(&self) -> PathBuf {
        self.store.exp_dir(self.id())
    }

    pub fn train_split(&self) -> Result<DatasetSplit> {
        let d = &self.config.dataset;
        DatasetSplit::scan(&d.root, &d.train_split, d.classes.as_deref())
    }

    pub fn eval_split(&self) -> Result<DatasetSplit> {
        let d = &self.config.dataset;
        DatasetSplit::scan(&d.root, &d.eval_split, d.classes.as_deref())
    }

    /// Resolves every resource the experiment needs and registers it in the
    /// store. Re-validating an unchanged config is a no-op.
    pub fn validate(&self) -> Result<ValidationSummary> {
        let train = self.train_split()?;
        let eval = self.eval_split()?;
        if train.class_ids() != eval.class_ids() {
            return Err(Error::Validation(format!(
                "splits {} and {} have different classes",
                self.config.dataset.train_split, self.config.dataset.eval_split
            )));
        }
        for (split, s) in [(&train, "train"), (&eval, "eval")] {
            if let Some(c) = split.classes.iter().find(|c| c.images.is_empty()) {
                return Err(Error::Validation(format!("{s} class {} has no images", c.class_id)));
            }
        }
        for b in self.config.evaluation_backends() {
            self.registry
                .encode_text(&b, &["ping"])
                .map_err(|e| Error::Validation(format!("backend {b}: {e}")))?;
            self.registry
                .encode_images(&b, &train.classes[0].images[..1])
                .map_err(|e| Error::Validation(format!("backend {b}: {e}")))?;
        }
        if !(self.config.offline || self.config.judge.stub) {
            self.config.judge.client(false).map_err(|e| Error::Validation(e.to_string()))?;
        }
        if let Some(p) = &self.config.judge.overrides_path {
            load_human_overrides(p).map_err(|e| Error::Validation(e.to_string()))?;
        }
        let _lock = self.store.lock(self.id())?;
        self.store.register(self.id(), &self.config.snapshot_hash())?;
        self.store.write_json(self.id(), store::CONFIG_FILE, &self.config)?;
        let policy_path = self.dir().join(REFERENCE_POLICY_FILE);
        if !policy_path.exists() {
            let policy = self.build_reference_policy()?;
            self.store.write_json(self.id(), REFERENCE_POLICY_FILE, &policy)?;
        }
        Ok(ValidationSummary {
            classes: train.class_ids(),
            train_counts: train.image_counts(),
            eval_counts: eval.image_counts(),
            backends: self.config.evaluation_backends(),
            prompt_sets: self.bank.names().map(str::to_string).collect(),
        })
    }

    fn build_reference_policy(&self) -> Result<TinyLm> {
        match &self.config.policy {
            PolicyConfig::Toy { seed } => toy::reference_model(&self.bank, *seed),
            PolicyConfig::Path { path } => {
                let text = fs::read_to_string(path).map_err(|e| Error::Validation(format!("policy {}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Validation(format!("policy {}: {e}", path.display())))
            }
        }
    }

    pub fn reference_policy(&self) -> Result<TinyLm> {
        self.store.read_json(self.id(), REFERENCE_POLICY_FILE)
    }

    /// Latest checkpoint under the align directory, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<Checkpoint>> {
        let dir = self.dir().join(store::ALIGN_DIR);
        if !dir.is_dir() {
            return Ok(None);
        }
        let mut best: Option<(usize, PathBuf)> = None;
        for e in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = e.map_err(|e| Error::io(&dir, e))?.path();
            let step = p
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step_"))
                .and_then(|n| n.parse::<usize>().ok());
            if let Some(s) = step {
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, p));
                }
            }
        }
        best.map(|(_, p)| Checkpoint::load(&p)).transpose()
    }

    /// Per-class reward prototypes from (a seeded sample of) training images.
    pub fn prototypes(&self, backend_id: &str) -> Result<BTreeMap<String, ClassPrototype>> {
        let train = self.train_split()?;
        let mut out = BTreeMap::new();
        for c in train.sample_per_class(self.config.dataset.max_images_per_class, self.config.seed) {
            let e = self.registry.encode_images(backend_id, &c.images)?;
            out.insert(c.class_id.clone(), build_prototype(&c.class_id, &e)?);
        }
        Ok(out)
    }

    fn check_status(&self, stage: Stage) -> Result<Status> {
        let status = self
            .store
            .status(self.id())?
            .ok_or_else(|| Error::Validation(format!("experiment {} has not been validated", self.id())))?;
        if status < stage.requires() {
            return Err(Error::Validation(format!(
                "stage {stage:?} needs status {:?}, experiment {} is {:?}",
                stage.requires(),
                self.id(),
                status
            )));
        }
        Ok(status)
    }

    /// Runs the requested stages in pipeline order. Completed stages are
    /// skipped; a failing stage leaves the status at the last completed one.
    pub fn run(&self, stages: &[Stage]) -> Result<ExperimentRecord> {
        if self.store.status(self.id())?.is_none() {
            self.validate()?;
        }
        let mut ordered = stages.to_vec();
        ordered.sort();
        ordered.dedup();
        for stage in ordered {
            let status = self.check_status(stage)?;
            if status >= stage.completes() && stage != Stage::Report {
                log::info!("{}: stage {stage:?} already complete", self.id());
                continue;
            }
            let _lock = self.store.lock(self.id())?;
            match stage {
                Stage::Align => self.align_stage()?,
                Stage::Generate => self.generate_stage()?,
                Stage::Judge => {
                    let client = self.config.judge.client(self.config.offline)?;
                    self.judge_stage(&client)?;
                }
                Stage::Evaluate => self.evaluate_stage()?,
                Stage::Report => {
                    let bundle = build_report(&self.store, &[self.id().to_string()])?;
                    bundle.write(&self.dir().join("report"))?;
                }
            }
            self.store.advance(self.id(), stage.completes())?;
        }
        self.record()
    }

    pub fn record(&self) -> Result<ExperimentRecord> {
        let status = self
            .store
            .status(self.id())?
            .ok_or_else(|| Error::Validation(format!("experiment {} has not been validated", self.id())))?;
        let log_path = self.dir().join(store::ALIGN_DIR).join("training_log.jsonl");
        let descriptions = self.store.load_descriptions(self.id())?;
        let eval_path = self.dir().join(store::EVAL_FILE);
        Ok(ExperimentRecord {
            config: self.config.clone(),
            status,
            training_log: log_path.exists().then_some(log_path),
            descriptions: self.dir().join(store::DESCRIPTIONS_FILE),
            eval: if eval_path.exists() { Some(self.store.read_json(self.id(), store::EVAL_FILE)?) } else { None },
            breakdown: (status >= Status::Judged).then(|| BreakdownReport::from_records(&descriptions)),
        })
    }

    fn question_prompts(&self, split: &DatasetSplit) -> Result<Vec<PromptSample>> {
        let mut out = Vec::new();
        for c in &split.classes {
            for (id, text) in self.bank.render(&self.config.prompts.questions, &c.name)? {
                out.push(PromptSample { prompt_id: id, class_id: c.class_id.clone(), text });
            }
        }
        Ok(out)
    }

    fn align_stage(&self) -> Result<()> {
        let policy = self.reference_policy()?;
        let train = self.train_split()?;
        let prompts = self.question_prompts(&train)?;
        let rewarder = SimilarityRewarder {
            registry: &self.registry,
            backend_id: self.config.reward_backend.clone(),
            prototypes: self.prototypes(&self.config.reward_backend)?,
            reward: self.config.reward,
        };
        let run_dir = self.dir().join(store::ALIGN_DIR);
        if run_dir.exists() {
            fs::remove_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        }
        let cfg = AlignConfig {
            ppo: self.config.ppo.clone(),
            kl: self.config.kl.clone(),
            checkpoint_every: self.config.checkpoint_every,
            run_dir: Some(run_dir.clone()),
        };
        let outcome = align(policy, &prompts, &rewarder, &cfg)?;
        let path = run_dir.join("warnings.json");
        fs::write(&path, serde_json::to_string_pretty(&outcome.warnings)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// The aligned policy if alignment ran, else the frozen reference.
    pub fn current_policy(&self) -> Result<TinyLm> {
        Ok(match self.latest_checkpoint()? {
            Some(c) => c.learner.policy,
            None => {
                log::warn!("{}: no alignment checkpoint, generating with the reference policy", self.id());
                self.reference_policy()?
            }
        })
    }

    /// Greedy answers to every question for every class.
    fn generate_stage(&self) -> Result<()> {
        let policy = self.current_policy()?;
        let train = self.train_split()?;
        let prototypes = self.prototypes(&self.config.reward_backend)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut records = Vec::new();
        for p in self.question_prompts(&train)? {
            let ids = policy.prompt_tokens(&p.text);
            let (tokens, _) = policy.generate(&ids, self.config.generation.max_new_tokens, 0.0, &mut rng);
            let text = policy.tokenizer().decode(&tokens);
            let description_id = format!("{}/{}", p.class_id, p.prompt_id);
            let reward = if text.trim().is_empty() {
                0.0
            } else {
                let e = self.registry.encode_text(&self.config.reward_backend, &[&text])?;
                score_description(&e[0], &prototypes[&p.class_id], &self.config.reward, &description_id)?.value
            };
            records.push(DescriptionRecord::new(description_id, p.class_id, p.prompt_id, text, reward));
        }
        self.store.append_descriptions(self.id(), &records)
    }

    /// Two-stage judging plus attribute extraction, persisting every record
    /// as soon as it is done so an interrupted run resumes where it stopped.
    pub fn judge_stage(&self, client: &JudgeClient) -> Result<BreakdownReport> {
        let mut records = self.store.load_descriptions(self.id())?;
        if records.is_empty() {
            return Err(Error::Validation(format!("experiment {} has no descriptions", self.id())));
        }
        let mut blank = Vec::new();
        for r in records.iter_mut().filter(|r| r.text.trim().is_empty() && r.informative == Informative::Unjudged) {
            // nothing to judge: an empty answer carries no information
            r.informative = Informative::No;
            r.visual = Visual::NotApplicable;
            blank.push(r.clone());
        }
        self.store.append_descriptions(self.id(), &blank)?;
        let store = &self.store;
        let id = self.id();
        categorize_all(client, &mut records, |r| store.append_descriptions(id, std::slice::from_ref(r)))?;
        if self.config.judge.extract_attributes {
            for r in records.iter_mut() {
                if r.informative == Informative::Yes && !r.raw_responses.contains_key(Check::Attributes.name()) {
                    extract_attributes(client, r)?;
                    self.store.append_descriptions(self.id(), std::slice::from_ref(r))?;
                }
            }
        }
        if let Some(p) = &self.config.judge.overrides_path {
            let overrides = load_human_overrides(p)?;
            let before = records.clone();
            let unused = apply_overrides(&mut records, &overrides);
            if !unused.is_empty() {
                log::warn!("{} override rows match no description", unused.len());
            }
            let changed: Vec<DescriptionRecord> =
                records.iter().zip(&before).filter(|(a, b)| a != b).map(|(a, _)| a.clone()).collect();
            self.store.append_descriptions(self.id(), &changed)?;
        }
        let failed = records
            .iter()
            .filter(|r| {
                let missing = |c: Check| !r.raw_responses.contains_key(c.name());
                (r.informative == Informative::Unjudged && missing(Check::Informative))
                    || (r.informative == Informative::Yes && r.visual == Visual::Unjudged && missing(Check::Visual))
            })
            .count();
        if failed > 0 {
            return Err(Error::Judge(format!(
                "{failed} descriptions could not be judged; rerun the judge stage to resume"
            )));
        }
        Ok(BreakdownReport::from_records(&records))
    }

    fn evaluate_stage(&self) -> Result<()> {
        let records: Vec<DescriptionRecord> = self.store.load_descriptions(self.id())?;
        let split = self.eval_split()?;
        let mut tables: EvalTables = BTreeMap::new();
        for b in self.config.evaluation_backends() {
            let mut results = evaluate_subsets(&self.registry, &b, &split, &records)?;
            let p = &self.config.prompts;
            results.insert(
                SubsetLabel::Generic80,
                evaluate_template_set(&self.registry, &b, &split, &self.bank, &p.baseline, SubsetLabel::Generic80)?,
            );
            results.insert(
                SubsetLabel::Custom3,
                evaluate_template_set(&self.registry, &b, &split, &self.bank, &p.probe, SubsetLabel::Custom3)?,
            );
            tables.insert(b, results);
        }
        self.store.write_json(self.id(), store::EVAL_FILE, &tables)
    }

    pub fn training_log(&self) -> Result<Option<TrainingLog>> {
        let p = self.dir().join(store::ALIGN_DIR).join("training_log.jsonl");
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        TrainingLog::from_jsonl(&text).map(Some)
    }
}

/// Config for the built-in toy world rooted at `dir`.
pub fn toy_config(dir: &Path, experiment_id: &str, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        experiment_id: experiment_id.into(),
        output_dir: dir.join("runs"),
        seed,
        offline: true,
        dataset: DatasetConfig { name: Some("toy-cats".into()), root: dir.join("data"), ..Default::default() },
        backends: vec![BackendSpec::Toy { id: "toy-kw".into(), toy: toy::ToyConfig::default() }],
        reward_backend: "toy-kw".into(),
        policy: PolicyConfig::Toy { seed },
        ..Default::default()
    };
    cfg.ppo.total_steps = 400;
    cfg.ppo.max_new_tokens = 12;
    cfg.ppo.seed = seed;
    cfg.generation.max_new_tokens = 12;
    cfg
}

/// Writes the toy dataset and an `experiment.toml` (with paths relative to
/// `dir`) and returns the config path.
pub fn init_toy(dir: &Path, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    toy::write_dataset(&dir.join("data"), &toy::ToyConfig::default())?;
    let cfg = toy_config(Path::new("."), "toy", seed);
    let path = dir.join("experiment.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
