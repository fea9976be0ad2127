use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ppo::{ppo_step, Learner, Whitener};
use super::{generate_rollouts, shape_rewards, PpoConfig, PromptSample, Rollout};
use crate::embedding::{BackendRegistry, ClassPrototype};
use crate::error::{Error, Result};
use crate::kl::{KlConfig, KlController};
use crate::lm::TinyLm;
use crate::reward::{score_description, RewardConfig, SimilarityScore};

/// Scores a batch of rollouts. Implementations may call out to a model
/// server, so failures are expected and handled by the training loop.
pub trait RewardSource {
    fn score(&self, rollouts: &[Rollout]) -> Result<Vec<SimilarityScore>>;
}

/// Similarity reward against per-class image prototypes.
pub struct SimilarityRewarder<'a> {
    pub registry: &'a BackendRegistry,
    pub backend_id: String,
    pub prototypes: BTreeMap<String, ClassPrototype>,
    pub reward: RewardConfig,
}

impl RewardSource for SimilarityRewarder<'_> {
    fn score(&self, rollouts: &[Rollout]) -> Result<Vec<SimilarityScore>> {
        if rollouts.is_empty() {
            return Ok(Vec::new());
        }
        let texts: Vec<&str> = rollouts.iter().map(|r| r.text.as_str()).collect();
        let embeddings = self.registry.encode_text(&self.backend_id, &texts)?;
        rollouts
            .iter()
            .zip(&embeddings)
            .enumerate()
            .map(|(i, (r, e))| {
                let proto = self.prototypes.get(&r.class_id).ok_or_else(|| {
                    Error::Config(format!("no image prototype for class {}", r.class_id))
                })?;
                score_description(e, proto, &self.reward, &format!("{}#{i}", r.prompt_id))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub ppo: PpoConfig,
    pub kl: KlConfig,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub run_dir: Option<PathBuf>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            kl: KlConfig::default(),
            checkpoint_every: 0,
            run_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub step: u64,
    pub mean_similarity: f64,
    pub mean_sequence_kl: f64,
    /// β after the controller update for this step.
    pub beta: f64,
    /// β used to shape this step's rewards.
    pub beta_used: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub discarded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<TrainingRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    /// Mean of `field` over the first (or last) `n` records.
    pub fn window_mean(&self, n: usize, last: bool, field: impl Fn(&TrainingRecord) -> f64) -> f64 {
        let n = n.min(self.records.len()).max(1);
        let slice = if last {
            &self.records[self.records.len().saturating_sub(n)..]
        } else {
            &self.records[..n.min(self.records.len())]
        };
        slice.iter().map(field).sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Saved state at `<run>/step_<n>/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub learner: Learner,
    pub controller: KlController,
    pub config: AlignConfig,
}

impl Checkpoint {
    pub fn save(&self, run_dir: &Path) -> Result<PathBuf> {
        let dir = run_dir.join(format!("step_{}", self.step));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, body) in [
            ("policy.json", serde_json::to_string(&self.learner)?),
            ("controller.json", serde_json::to_string_pretty(&self.controller)?),
            ("config.json", serde_json::to_string_pretty(&self.config)?),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let step = dir
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Input(format!("{} is not a step_<n> directory", dir.display())))?;
        Ok(Self {
            step,
            learner: serde_json::from_str(&read("policy.json")?)?,
            controller: serde_json::from_str(&read("controller.json")?)?,
            config: serde_json::from_str(&read("config.json")?)?,
        })
    }
}

pub struct AlignOutcome {
    pub learner: Learner,
    pub reference: TinyLm,
    pub controller: KlController,
    pub log: TrainingLog,
    pub warnings: Vec<String>,
    pub aborted_steps: usize,
}

impl AlignOutcome {
    pub fn policy(&self) -> &TinyLm {
        &self.learner.policy
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs the PPO loop: sample prompts, generate, score, shape with the KL
/// penalty, update, then adapt β.
pub fn align(
    policy: TinyLm,
    prompts: &[PromptSample],
    rewarder: &dyn RewardSource,
    cfg: &AlignConfig,
) -> Result<AlignOutcome> {
    cfg.ppo.validate()?;
    if prompts.is_empty() {
        return Err(Error::Input("alignment needs at least one prompt".into()));
    }
    let reference = policy.clone();
    let mut learner = Learner::new(policy, cfg.ppo.learning_rate);
    let mut controller = KlController::new(cfg.kl.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.ppo.seed);
    let mut whitener = Whitener::default();
    let mut log = TrainingLog::default();
    let mut warnings = Vec::new();
    let mut aborted_steps = 0;

    let log_path = match &cfg.run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("training_log.jsonl");
            fs::write(&p, "").map_err(|e| Error::io(&p, e))?;
            Some(p)
        }
        None => None,
    };
    let checkpoint = |learner: &Learner, controller: &KlController, step: usize| -> Result<()> {
        if let Some(dir) = &cfg.run_dir {
            Checkpoint {
                step,
                learner: learner.clone(),
                controller: controller.clone(),
                config: cfg.clone(),
            }
            .save(dir)?;
        }
        Ok(())
    };

    for step in 0..cfg.ppo.total_steps {
        let batch: Vec<PromptSample> = (0..cfg.ppo.batch_size)
            .map(|_| prompts[rng.gen_range(0..prompts.len())].clone())
            .collect();
        let generated = generate_rollouts(
            &learner.policy,
            &learner.value_head,
            &reference,
            &batch,
            cfg.ppo.max_new_tokens,
            cfg.ppo.temperature,
            &mut rng,
        )?;
        let mut rollouts = generated.rollouts;
        if rollouts.is_empty() {
            warnings.push(format!("step {step}: every rollout was discarded"));
            continue;
        }
        let scores = match rewarder.score(&rollouts) {
            Ok(s) => s,
            Err(e) => {
                checkpoint(&learner, &controller, step)?;
                return Err(Error::Training(format!("reward backend failed at step {step}: {e}")));
            }
        };
        if cfg.ppo.whiten_rewards {
            for s in &scores {
                whitener.observe(s.value);
            }
        }
        let beta_used = controller.beta();
        let mut shaped = Vec::with_capacity(rollouts.len());
        for (r, s) in rollouts.iter_mut().zip(scores) {
            let terminal = if cfg.ppo.whiten_rewards {
                whitener.whiten(s.value)
            } else {
                s.value
            };
            shaped.push(shape_rewards(r, beta_used, terminal)?);
            r.similarity = Some(s);
        }
        let n = rollouts.len() as f64;
        let mean_kl = rollouts.iter().map(Rollout::sequence_kl).sum::<f64>() / n;
        let mean_similarity = rollouts
            .iter()
            .map(|r| r.similarity.as_ref().map_or(0.0, |s| s.value))
            .sum::<f64>()
            / n;

        let stats = match ppo_step(&mut learner, &rollouts, &shaped, &cfg.ppo, &mut rng) {
            Ok(s) => s,
            Err(Error::Training(msg)) => {
                log::warn!("step {step} aborted: {msg}");
                warnings.push(format!("step {step} aborted: {msg}"));
                aborted_steps += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        controller.update(mean_kl)?;
        let record = TrainingRecord {
            step: log.records.len() as u64,
            mean_similarity,
            mean_sequence_kl: mean_kl,
            beta: controller.beta(),
            beta_used,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            clip_fraction: stats.clip_fraction,
            discarded: generated.discarded,
        };
        if let Some(p) = &log_path {
            append_line(p, &(serde_json::to_string(&record)? + "\n"))?;
        }
        log.records.push(record);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            checkpoint(&learner, &controller, step + 1)?;
        }
    }

    if !log.records.is_empty() {
        let final_kl = log.window_mean(10, true, |r| r.mean_sequence_kl);
        let target = cfg.kl.target_kl;
        if !(0.5 * target..=2.0 * target).contains(&final_kl) {
            let msg = format!("final mean sequence KL {final_kl:.3} is outside [{}, {}]", 0.5 * target, 2.0 * target);
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    if let Some(dir) = &cfg.run_dir {
        checkpoint(&learner, &controller, cfg.ppo.total_steps)?;
        controller.write_trace_csv(&dir.join("kl_trace.csv"))?;
    }
    Ok(AlignOutcome {
        learner,
        reference,
        controller,
        log,
        warnings,
        aborted_steps,
    })
}
