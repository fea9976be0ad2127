//! Alignment-loop properties on a short toy run.

use std::collections::BTreeMap;
use std::sync::Arc;

use vlmprobe::dataset::DatasetSplit;
use vlmprobe::embedding::{build_prototype, BackendRegistry};
use vlmprobe::lm::TinyLm;
use vlmprobe::prompts::{PromptBank, QUESTIONS25};
use vlmprobe::reward::RewardConfig;
use vlmprobe::toy::{self, ToyConfig};
use vlmprobe::trainer::{align, AlignConfig, AlignOutcome, PromptSample, SimilarityRewarder};

struct World {
    _dir: tempfile::TempDir,
    registry: BackendRegistry,
    split: DatasetSplit,
    bank: PromptBank,
}

fn world() -> World {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ToyConfig { train_per_class: 6, test_per_class: 2, ..ToyConfig::default() };
    toy::write_dataset(dir.path(), &cfg).unwrap();
    let mut registry = BackendRegistry::new();
    registry.register(Arc::new(toy::keyword_backend("kw", &cfg).unwrap())).unwrap();
    let split = DatasetSplit::scan(dir.path(), "train", None).unwrap();
    World { _dir: dir, registry, split, bank: PromptBank::builtin() }
}

fn run(w: &World, policy: TinyLm, beta0: f64, steps: usize) -> AlignOutcome {
    let mut prototypes = BTreeMap::new();
    let mut prompts = Vec::new();
    for c in &w.split.classes {
        let e = w.registry.encode_images("kw", &c.images).unwrap();
        prototypes.insert(c.class_id.clone(), build_prototype(&c.class_id, &e).unwrap());
        for (id, text) in w.bank.render(QUESTIONS25, &c.name).unwrap() {
            prompts.push(PromptSample { prompt_id: id, class_id: c.class_id.clone(), text });
        }
    }
    let rewarder = SimilarityRewarder {
        registry: &w.registry,
        backend_id: "kw".into(),
        prototypes,
        reward: RewardConfig::default(),
    };
    let mut cfg = AlignConfig::default();
    cfg.ppo.total_steps = steps;
    cfg.ppo.max_new_tokens = 10;
    cfg.ppo.batch_size = 16;
    cfg.kl.initial_beta = beta0;
    align(policy, &prompts, &rewarder, &cfg).unwrap()
}

#[test]
fn reference_is_untouched_and_runs_repeat() {
    let w = world();
    let policy = toy::reference_model(&w.bank, 1).unwrap();
    let before = policy.params().to_vec();
    let a = run(&w, policy.clone(), 0.2, 15);
    let b = run(&w, policy, 0.2, 15);
    assert_eq!(a.reference.params(), before.as_slice());
    assert_eq!(a.log.records.len(), 15);
    assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    assert_eq!(a.policy().params(), b.policy().params());
    assert_ne!(a.policy().params(), before.as_slice());
}

#[test]
fn heavy_kl_penalty_keeps_policy_closer() {
    let w = world();
    let policy = toy::reference_model(&w.bank, 1).unwrap();
    let tail = |o: &AlignOutcome| o.log.window_mean(10, true, |r| r.mean_sequence_kl);
    let strict = run(&w, policy.clone(), 10.0, 60);
    let loose = run(&w, policy, 0.01, 60);
    assert!(tail(&strict) < tail(&loose), "{} vs {}", tail(&strict), tail(&loose));
}
