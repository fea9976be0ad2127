use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PpoConfig, Rollout};
use crate::error::{Error, Result};
use crate::lm::{clip_grad_norm, Adam, TinyLm, ValueHead};

/// Generalized advantage estimates and value targets for one sequence. The
/// value after the last token is zero.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Running mean and standard deviation (Welford) for terminal rewards.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Whitener {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Whitener {
    pub fn observe(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            1.0
        } else {
            (self.m2 / (self.count - 1) as f64).sqrt()
        }
    }

    pub fn whiten(&self, x: f64) -> f64 {
        (x - self.mean) / self.std().max(1e-8)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Policy and value parameters plus their optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub policy: TinyLm,
    pub value_head: ValueHead,
    policy_opt: Adam,
    value_opt: Adam,
}

impl Learner {
    pub fn new(policy: TinyLm, learning_rate: f64) -> Self {
        let value_head = ValueHead::new(policy.hidden_dim());
        let policy_opt = Adam::new(policy.num_params(), learning_rate);
        let value_opt = Adam::new(value_head.params().len(), learning_rate);
        Self {
            policy,
            value_head,
            policy_opt,
            value_opt,
        }
    }
}

fn whiten_in_place(groups: &mut [Vec<f64>]) {
    let flat: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = flat.len() as f64;
    let mean = flat.iter().sum::<f64>() / n;
    let var = flat.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in groups.iter_mut().flatten() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// One PPO update: GAE advantages, then `epochs` passes of the clipped
/// surrogate and value regression over `minibatches` shards. On a
/// non-finite loss or gradient the learner is restored and an error returned.
pub fn ppo_step(
    learner: &mut Learner,
    rollouts: &[Rollout],
    shaped_rewards: &[Vec<f64>],
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<PpoStats> {
    if rollouts.is_empty() {
        return Err(Error::Input("ppo_step needs at least one rollout".into()));
    }
    if rollouts.len() != shaped_rewards.len() {
        return Err(Error::Input("one shaped reward vector per rollout required".into()));
    }
    let (mut advantages, returns): (Vec<Vec<f64>>, Vec<Vec<f64>>) = rollouts
        .iter()
        .zip(shaped_rewards)
        .map(|(r, s)| gae(s, &r.values, cfg.gamma, cfg.gae_lambda))
        .unzip();
    if cfg.whiten_advantages {
        whiten_in_place(&mut advantages);
    }

    let snapshot = learner.clone();
    let result = run_epochs(learner, rollouts, &advantages, &returns, cfg, rng);
    if result.is_err() {
        *learner = snapshot;
    }
    result
}

fn run_epochs(
    learner: &mut Learner,
    rollouts: &[Rollout],
    advantages: &[Vec<f64>],
    returns: &[Vec<f64>],
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<PpoStats> {
    let eps = cfg.clip_epsilon;
    let shard = rollouts.len().div_ceil(cfg.minibatches);
    let mut order: Vec<usize> = (0..rollouts.len()).collect();
    let (mut p_loss, mut v_loss, mut clipped, mut evals, mut norm_sum, mut updates) =
        (0.0, 0.0, 0usize, 0usize, 0.0, 0usize);

    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(shard) {
            let tokens: usize = batch.iter().map(|&i| rollouts[i].len()).sum();
            let scale = 1.0 / tokens as f64;
            let mut grad_p = vec![0.0; learner.policy.num_params()];
            let mut grad_v = vec![0.0; learner.value_head.params().len()];
            let (mut batch_p, mut batch_v) = (0.0, 0.0);
            for &i in batch {
                let r = &rollouts[i];
                let mut ctx = r.prompt_tokens.clone();
                for (t, &tok) in r.generated.iter().enumerate() {
                    let cache = learner.policy.step(&ctx, t);
                    let ratio = (cache.logprob(tok) - r.policy_logprobs[t]).exp();
                    let a = advantages[i][t];
                    let surr = ratio * a;
                    let surr_clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
                    batch_p -= surr.min(surr_clipped) * scale;
                    if (ratio - 1.0).abs() > eps {
                        clipped += 1;
                    }
                    if surr <= surr_clipped {
                        learner
                            .policy
                            .accumulate_logprob_grad(&cache, tok, -a * ratio * scale, &mut grad_p);
                    }
                    let v = learner.value_head.value(&cache.hidden);
                    let err = v - returns[i][t];
                    batch_v += 0.5 * err * err * scale;
                    learner.value_head.accumulate_grad(
                        &cache.hidden,
                        cfg.value_coef * err * scale,
                        &mut grad_v,
                    );
                    evals += 1;
                    ctx.push(tok);
                }
            }
            let norm = clip_grad_norm(&mut grad_p, cfg.max_grad_norm);
            clip_grad_norm(&mut grad_v, cfg.max_grad_norm);
            if !(batch_p.is_finite() && batch_v.is_finite() && norm.is_finite())
                || grad_v.iter().any(|g| !g.is_finite())
            {
                log::warn!("non-finite PPO loss; restoring pre-step parameters");
                return Err(Error::Training("non-finite loss in PPO step".into()));
            }
            learner.policy_opt.step(learner.policy.params_mut(), &grad_p);
            learner.value_opt.step(learner.value_head.params_mut(), &grad_v);
            p_loss += batch_p;
            v_loss += batch_v;
            norm_sum += norm;
            updates += 1;
        }
    }
    Ok(PpoStats {
        policy_loss: p_loss / updates as f64,
        value_loss: v_loss / updates as f64,
        clip_fraction: clipped as f64 / evals as f64,
        grad_norm: norm_sum / updates as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{TinyLmConfig, Tokenizer};
    use crate::trainer::{generate_rollouts, PromptSample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gae_matches_hand_computation() {
        // gamma 1, lambda 1: advantage = reward-to-go minus value
        let (a, r) = gae(&[1.0, 0.0, 2.0], &[0.5, 0.5, 0.5], 1.0, 1.0);
        assert_eq!(a, vec![2.5, 1.5, 1.5]);
        assert_eq!(r, vec![3.0, 2.0, 2.0]);
        // lambda 0: one-step TD errors
        let (a, _) = gae(&[1.0, 0.0], &[0.5, 0.25], 0.9, 0.0);
        assert!((a[0] - (1.0 + 0.9 * 0.25 - 0.5)).abs() < 1e-12);
        assert!((a[1] - (0.0 - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn whitener_statistics() {
        let mut w = Whitener::default();
        for x in [1.0, 2.0, 3.0, 4.0] {
            w.observe(x);
        }
        assert!((w.mean() - 2.5).abs() < 1e-12);
        assert!((w.std() - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    fn setup() -> (Learner, TinyLm, Vec<Rollout>) {
        let tok = Tokenizer::from_texts(["what is it ? it is striped spotted ."]);
        let lm = TinyLm::new(tok, TinyLmConfig { seed: 1, init_scale: 0.3, ..Default::default() }).unwrap();
        let learner = Learner::new(lm.clone(), 1e-3);
        let prompts = vec![PromptSample { prompt_id: "q".into(), class_id: "c".into(), text: "what is it?".into() }];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rollouts = Vec::new();
        while rollouts.is_empty() {
            rollouts = generate_rollouts(&learner.policy, &learner.value_head, &lm, &prompts, 5, 1.0, &mut rng)
                .unwrap()
                .rollouts;
        }
        (learner, lm, rollouts)
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        let (mut learner, _, rollouts) = setup();
        let before = learner.policy.clone();
        let zeros: Vec<Vec<f64>> = rollouts.iter().map(|r| vec![0.0; r.len()]).collect();
        let cfg = PpoConfig { whiten_advantages: false, ..Default::default() };
        let stats = ppo_step(&mut learner, &rollouts, &zeros, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(learner.policy, before);
        assert!((0.0..=1.0).contains(&stats.clip_fraction));
    }

    #[test]
    fn positive_advantage_raises_sequence_logprob() {
        let (mut learner, _, rollouts) = setup();
        let r = &rollouts[0];
        let before: f64 = learner.policy.score(&r.prompt_tokens, &r.generated).iter().sum();
        let rewards = vec![vec![1.0; r.len()]];
        let cfg = PpoConfig {
            epochs: 1,
            minibatches: 1,
            whiten_advantages: false,
            ..Default::default()
        };
        let mut small = Learner::new(learner.policy.clone(), 1e-4);
        small.value_head = learner.value_head.clone();
        learner = small;
        let stats = ppo_step(&mut learner, &rollouts[..1], &rewards, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let after: f64 = learner.policy.score(&r.prompt_tokens, &r.generated).iter().sum();
        assert!(after > before, "{before} -> {after}");
        assert!((0.0..=1.0).contains(&stats.clip_fraction));
    }

    #[test]
    fn non_finite_rewards_restore_parameters() {
        let (mut learner, _, rollouts) = setup();
        let before = learner.clone();
        let bad: Vec<Vec<f64>> = rollouts.iter().map(|r| vec![f64::NAN; r.len()]).collect();
        let cfg = PpoConfig { whiten_advantages: false, ..Default::default() };
        let res = ppo_step(&mut learner, &rollouts, &bad, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(res, Err(Error::Training(_))));
        assert_eq!(learner, before);
    }
}
