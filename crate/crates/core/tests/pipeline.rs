//! Stage pipeline behaviour on the toy world: validation, generate-only,
//! full runs and resuming an interrupted judge stage.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use vlmprobe::inspect::{Check, Informative, Judge, JudgeClient, RetryPolicy, StubLexicon};
use vlmprobe::orchestrate::{toy_config, ExperimentConfig, Pipeline, Stage, Status};
use vlmprobe::toy::{self, ToyConfig};
use vlmprobe::{Error, Result};

fn small_world(dir: &Path, per_class: usize) -> ExperimentConfig {
    let world = ToyConfig { train_per_class: per_class, test_per_class: per_class, ..ToyConfig::default() };
    toy::write_dataset(&dir.join("data"), &world).unwrap();
    let mut cfg = toy_config(dir, "toy", 0);
    cfg.backends = vec![vlmprobe::orchestrate::BackendSpec::Toy { id: "toy-kw".into(), toy: world }];
    cfg.ppo.total_steps = 20;
    cfg
}

#[test]
fn validate_counts_images_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small_world(dir.path(), 4)).unwrap();
    let summary = p.validate().unwrap();
    assert_eq!(summary.classes.len(), 3);
    assert_eq!(summary.train_counts, vec![4, 4, 4]);
    assert_eq!(summary.eval_counts, vec![4, 4, 4]);

    let again = p.validate().unwrap();
    assert_eq!(again, summary);
    let index = p.store.index().unwrap();
    assert_eq!(index.len(), 1);
    assert_eq!(index["toy"].status, Status::Validated);
}

#[test]
fn changed_config_under_same_id_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_world(dir.path(), 4);
    Pipeline::new(cfg.clone()).unwrap().validate().unwrap();
    let mut changed = cfg;
    changed.kl.target_kl = 20.0;
    let err = Pipeline::new(changed).unwrap().validate().unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
}

#[test]
fn missing_class_directory_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_world(dir.path(), 4);
    cfg.dataset.classes = Some(vec!["tiger".into(), "lynx".into()]);
    let err = Pipeline::new(cfg).unwrap().validate().unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains(&dir.path().join("data").join("train").join("lynx").display().to_string()), "{msg}");
}

#[test]
fn generate_only_uses_the_frozen_policy() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small_world(dir.path(), 4)).unwrap();
    let record = p.run(&[Stage::Generate]).unwrap();
    assert_eq!(record.status, Status::Generated);
    let records = p.store.load_descriptions("toy").unwrap();
    assert_eq!(records.len(), 25 * 3);
    assert!(p.training_log().unwrap().is_none());
    for class in ["tiger", "leopard", "panther"] {
        assert_eq!(records.iter().filter(|r| r.class_id == class).count(), 25);
    }
}

#[test]
fn full_run_reaches_reported_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small_world(dir.path(), 6)).unwrap();
    let record = p.run(&Stage::ALL).unwrap();
    assert_eq!(record.status, Status::Reported);
    let report_dir = p.store.exp_dir("toy").join("report");
    let before = std::fs::read(report_dir.join("main_accuracy.csv")).unwrap();
    let log_before = std::fs::read_to_string(p.store.exp_dir("toy").join("align").join("training_log.jsonl")).unwrap();

    // completed stages are skipped; the report is rebuilt from persisted state
    let again = p.run(&Stage::ALL).unwrap();
    assert_eq!(again.status, Status::Reported);
    assert_eq!(std::fs::read(report_dir.join("main_accuracy.csv")).unwrap(), before);
    let log_after = std::fs::read_to_string(p.store.exp_dir("toy").join("align").join("training_log.jsonl")).unwrap();
    assert_eq!(log_before, log_after);
    assert_eq!(p.store.load_descriptions("toy").unwrap().len(), 75);
}

/// Stub judge that counts informative calls and can be told to fail after
/// a fixed number of calls, like a process killed mid-stage.
struct Flaky {
    inner: StubLexicon,
    calls: Arc<AtomicUsize>,
    informative_calls: Arc<AtomicUsize>,
    budget: usize,
}

impl Judge for Flaky {
    fn model_id(&self) -> &str {
        "flaky-stub"
    }

    fn ask(&self, check: Check, concept: &str, description: &str) -> Result<String> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(Error::Judge("connection reset".into()));
        }
        if check == Check::Informative {
            self.informative_calls.fetch_add(1, Ordering::SeqCst);
        }
        self.inner.ask(check, concept, description)
    }
}

fn flaky_client(budget: usize) -> (JudgeClient, Arc<AtomicUsize>) {
    let informative_calls = Arc::new(AtomicUsize::new(0));
    let judge = Flaky {
        inner: StubLexicon::default(),
        calls: Arc::new(AtomicUsize::new(0)),
        informative_calls: informative_calls.clone(),
        budget,
    };
    let retry = RetryPolicy { attempts: 1, initial_backoff_ms: 0, ..RetryPolicy::default() };
    (JudgeClient::new(Box::new(judge), retry), informative_calls)
}

#[test]
fn interrupted_judge_resumes_without_repeating_calls() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_world(dir.path(), 4);
    cfg.judge.extract_attributes = false;
    let p = Pipeline::new(cfg).unwrap();
    p.run(&[Stage::Generate]).unwrap();

    let (client, _) = flaky_client(20);
    assert!(p.judge_stage(&client).is_err());
    let after_crash = p.store.load_descriptions("toy").unwrap();
    let still_open = after_crash.iter().filter(|r| r.informative == Informative::Unjudged).count();
    assert!(still_open > 0 && still_open < after_crash.len(), "{still_open} of {}", after_crash.len());

    let (client, informative_calls) = flaky_client(usize::MAX);
    let report = p.judge_stage(&client).unwrap();
    assert_eq!(informative_calls.load(Ordering::SeqCst), still_open);
    assert_eq!(report.unjudged, 0);
    assert_eq!(report.total, 75);

    // judged records are never re-asked
    let (client, informative_calls) = flaky_client(usize::MAX);
    p.judge_stage(&client).unwrap();
    assert_eq!(informative_calls.load(Ordering::SeqCst), 0);
}
