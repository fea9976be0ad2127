//! PPO alignment of the policy language model against the similarity reward,
//! with a per-token KL penalty toward a frozen reference copy.

mod align;
mod ppo;

pub use align::{
    align, AlignConfig, AlignOutcome, Checkpoint, RewardSource, SimilarityRewarder,
    TrainingLog, TrainingRecord,
};
pub use ppo::{gae, ppo_step, Learner, PpoStats, Whitener};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kl::sequence_kl;
use crate::lm::{TinyLm, TokenId, ValueHead, EOS};
use crate::reward::SimilarityScore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub total_steps: usize,
    pub seed: u64,
    pub whiten_rewards: bool,
    pub whiten_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            gamma: 1.0,
            gae_lambda: 0.95,
            epochs: 4,
            minibatches: 4,
            learning_rate: 1e-3,
            batch_size: 32,
            max_new_tokens: 64,
            temperature: 1.0,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            total_steps: 100,
            seed: 0,
            whiten_rewards: true,
            whiten_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must be in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must be in [0, 1]");
        }
        if self.epochs == 0 || self.minibatches == 0 || self.batch_size == 0 {
            return bad("epochs, minibatches and batch_size must be positive");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) || self.temperature < 0.0 {
            return bad("learning_rate and max_grad_norm must be positive, temperature non-negative");
        }
        Ok(())
    }
}

/// A prompt drawn for generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSample {
    pub prompt_id: String,
    pub class_id: String,
    pub text: String,
}

/// One sampled description with everything PPO needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt_id: String,
    pub class_id: String,
    pub prompt_tokens: Vec<TokenId>,
    pub generated: Vec<TokenId>,
    pub policy_logprobs: Vec<f64>,
    pub reference_logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub similarity: Option<SimilarityScore>,
    pub text: String,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generated.is_empty()
    }

    pub fn sequence_kl(&self) -> f64 {
        sequence_kl(&self.policy_logprobs, &self.reference_logprobs)
            .expect("rollout arrays share a nonzero length")
    }
}

/// Rollouts kept plus the number discarded for yielding no words.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub rollouts: Vec<Rollout>,
    pub discarded: usize,
}

/// Samples one description per prompt and records per-token log-probs under
/// the policy and the reference plus the value estimates.
pub fn generate_rollouts(
    policy: &TinyLm,
    value_head: &ValueHead,
    reference: &TinyLm,
    prompts: &[PromptSample],
    max_new_tokens: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<RolloutBatch> {
    if policy.tokenizer() != reference.tokenizer() {
        return Err(Error::Config("policy and reference tokenizers differ".into()));
    }
    if prompts.is_empty() {
        return Err(Error::Input("no prompts to generate from".into()));
    }
    let mut rollouts = Vec::with_capacity(prompts.len());
    let mut discarded = 0;
    for prompt in prompts {
        let prompt_tokens = policy.prompt_tokens(&prompt.text);
        let mut context = prompt_tokens.clone();
        let (mut generated, mut policy_logprobs, mut values) = (vec![], vec![], vec![]);
        for pos in 0..max_new_tokens {
            let cache = policy.step(&context, pos);
            let tok = policy.pick(&cache, temperature, rng);
            generated.push(tok);
            policy_logprobs.push(cache.logprob(tok));
            values.push(value_head.value(&cache.hidden));
            context.push(tok);
            if tok == EOS {
                break;
            }
        }
        let text = policy.tokenizer().decode(&generated);
        if !text.chars().any(char::is_alphanumeric) {
            discarded += 1;
            continue;
        }
        let reference_logprobs = reference.score(&prompt_tokens, &generated);
        rollouts.push(Rollout {
            prompt_id: prompt.prompt_id.clone(),
            class_id: prompt.class_id.clone(),
            prompt_tokens,
            generated,
            policy_logprobs,
            reference_logprobs,
            values,
            similarity: None,
            text,
        });
    }
    Ok(RolloutBatch { rollouts, discarded })
}

/// Per-token reward: `−β·(log π − log π_ref)` on every token, plus the
/// (possibly whitened) similarity score on the last token. The sum equals
/// `terminal − β·sequence_kl`.
pub fn shape_rewards(rollout: &Rollout, beta: f64, terminal: f64) -> Result<Vec<f64>> {
    let t = rollout.generated.len();
    if t == 0 || rollout.policy_logprobs.len() != t || rollout.reference_logprobs.len() != t {
        return Err(Error::Input(format!(
            "rollout arrays disagree: {} tokens, {} policy logprobs, {} reference logprobs",
            t,
            rollout.policy_logprobs.len(),
            rollout.reference_logprobs.len()
        )));
    }
    if !terminal.is_finite() || !beta.is_finite() {
        return Err(Error::Input("non-finite reward input".into()));
    }
    let mut out: Vec<f64> = rollout
        .policy_logprobs
        .iter()
        .zip(&rollout.reference_logprobs)
        .map(|(p, r)| -beta * (p - r))
        .collect();
    out[t - 1] += terminal;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rollout(policy: Vec<f64>, reference: Vec<f64>) -> Rollout {
        Rollout {
            prompt_id: "q".into(),
            class_id: "c".into(),
            prompt_tokens: vec![1],
            generated: vec![3; policy.len()],
            values: vec![0.0; policy.len()],
            policy_logprobs: policy,
            reference_logprobs: reference,
            similarity: None,
            text: "x".into(),
        }
    }

    #[test]
    fn shaped_rewards_worked_example() {
        let r = rollout(vec![-0.5, -0.7, -0.8], vec![-1.0, -1.0, -1.0]);
        let shaped = shape_rewards(&r, 0.1, 0.5).unwrap();
        let expected = [-0.05, -0.03, 0.48];
        for (a, b) in shaped.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{shaped:?}");
        }
        let identity = shaped.iter().sum::<f64>() + 0.1 * r.sequence_kl() - 0.5;
        assert!(identity.abs() < 1e-9);
    }

    #[test]
    fn zero_beta_identical_models() {
        let r = rollout(vec![-1.0, -2.0], vec![-1.0, -2.0]);
        assert_eq!(shape_rewards(&r, 0.0, 0.7).unwrap(), vec![0.0, 0.7]);
    }

    #[test]
    fn malformed_rollout_rejected() {
        let r = rollout(vec![-1.0, -2.0], vec![-1.0]);
        assert!(shape_rewards(&r, 0.1, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        assert!(PpoConfig { clip_epsilon: 1.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { gamma: 0.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { gae_lambda: 1.5, ..Default::default() }.validate().is_err());
    }
}
