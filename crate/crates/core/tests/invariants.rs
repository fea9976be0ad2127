//! Property tests for the numeric and bookkeeping invariants.

use std::sync::Arc;

use proptest::prelude::*;
use vlmprobe::embedding::{build_prototype, BackendRegistry, EmbeddingVector, HashProjection};
use vlmprobe::inspect::{categorize_all, percent_one_decimal, DescriptionRecord, Informative, JudgeClient, Visual};
use vlmprobe::prompts::{PromptBank, CUSTOM3, GENERIC80, QUESTIONS25};
use vlmprobe::reward::{score_description, RewardConfig};
use vlmprobe::zeroshot::{build_class_embeddings, classify_rows, ClassDescriptions};

fn unit_vectors(n: usize, d: usize) -> impl Strategy<Value = Vec<EmbeddingVector>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n).prop_filter_map("zero vector", |vs| {
        vs.into_iter().map(EmbeddingVector::normalized).collect::<Result<Vec<_>, _>>().ok()
    })
}

fn fixture() -> impl Strategy<Value = (Vec<EmbeddingVector>, EmbeddingVector)> {
    (1usize..30, 1usize..16).prop_flat_map(|(n, d)| {
        (unit_vectors(n, d), unit_vectors(1, d).prop_map(|mut v| v.remove(0)))
    })
}

proptest! {
    #[test]
    fn prototype_is_permutation_invariant((images, _) in fixture(), seed in any::<u64>()) {
        let mut shuffled = images.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = build_prototype("c", &images).unwrap();
        let b = build_prototype("c", &shuffled).unwrap();
        prop_assert_eq!(a.vector, b.vector);
    }

    #[test]
    fn score_is_linear_in_tau_and_bounded((images, text) in fixture(), tau in 0.01f64..50.0) {
        let proto = build_prototype("c", &images).unwrap();
        let once = score_description(&text, &proto, &RewardConfig::new(tau).unwrap(), "d").unwrap().value;
        let twice = score_description(&text, &proto, &RewardConfig::new(2.0 * tau).unwrap(), "d").unwrap().value;
        prop_assert_eq!(twice, 2.0 * once);
        prop_assert!(once.abs() <= tau * (1.0 + 1e-12));
    }

    #[test]
    fn classification_ignores_positive_scaling(
        images in unit_vectors(20, 6),
        rows in unit_vectors(4, 6),
        row_scale in 0.01f64..100.0,
    ) {
        let plain: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let scaled_rows: Vec<Vec<f64>> = rows.iter().map(|r| r.as_slice().iter().map(|v| v * row_scale).collect()).collect();
        let scaled: Vec<&[f64]> = scaled_rows.iter().map(|r| r.as_slice()).collect();
        let a = classify_rows(&images, &plain).unwrap();
        let b = classify_rows(&images, &scaled).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn class_table_ignores_description_order(
        words in prop::collection::vec("[a-z]{1,8}( [a-z]{1,8}){0,4}", 2..12),
        pick in any::<prop::sample::Index>(),
    ) {
        let mut registry = BackendRegistry::new();
        registry.register(Arc::new(HashProjection::new("h", 12, 1).unwrap())).unwrap();
        let table = |texts: Vec<String>| {
            build_class_embeddings(&registry, "h", &[ClassDescriptions { class_id: "c".into(), name: "c".into(), texts }]).unwrap()
        };
        // remove one description and append it again
        let mut moved = words.clone();
        let removed = moved.remove(pick.index(words.len()));
        moved.push(removed);
        let a = table(words);
        let b = table(moved);
        prop_assert!((a.rows[0].norm() - 1.0).abs() < 1e-6);
        prop_assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn stub_judging_is_two_stage_consistent(
        texts in prop::collection::vec(
            prop::collection::vec(prop::sample::select(vec![
                "striped", "fur", "jungle", "hunts", "family", "click", "enlarge", "photo", "the", "a",
                "tail", "savanna", "large", "credit", "image", "spotted",
            ]), 1..6),
            1..30,
        ),
    ) {
        let make = || -> Vec<DescriptionRecord> {
            texts.iter().enumerate()
                .map(|(i, w)| DescriptionRecord::new(format!("d{i}"), "cat", "q", w.join(" "), 0.0))
                .collect()
        };
        let mut a = make();
        let mut b = make();
        let report = categorize_all(&JudgeClient::stub(), &mut a, |_| Ok(())).unwrap();
        categorize_all(&JudgeClient::stub(), &mut b, |_| Ok(())).unwrap();
        prop_assert_eq!(&a, &b);
        for r in &a {
            prop_assert!(r.is_consistent());
            if r.informative != Informative::Yes {
                prop_assert!(matches!(r.visual, Visual::NotApplicable | Visual::Unjudged));
            }
        }
        prop_assert_eq!(report.informative + report.spurious + report.unjudged, report.total);
        prop_assert_eq!(report.visual + report.nonvisual, report.informative);
        for f in [report.informative_fraction, report.visual_fraction].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&f));
        }
        let recomputed = vlmprobe::inspect::BreakdownReport::from_records(&a);
        prop_assert_eq!(recomputed, report);
    }

    #[test]
    fn agreement_percent_is_rounded_ratio(den in 1usize..5000, num_frac in 0.0f64..=1.0) {
        let num = (den as f64 * num_frac) as usize;
        let p = percent_one_decimal(num, den);
        // exact rational rounding, half away from zero
        let tenths = (num * 1000 * 2 + den) / (2 * den);
        prop_assert_eq!(p, tenths as f64 / 10.0);
    }

    #[test]
    fn rendering_differs_only_at_the_placeholder(a in "[a-z]{1,10}( [a-z]{1,10})?", b in "[A-Z]{1,10}") {
        let bank = PromptBank::builtin();
        let (a, b) = (format!("⟦{a}⟧"), format!("⟦{b}⟧"));
        for set in [QUESTIONS25, GENERIC80, CUSTOM3] {
            let ra = bank.render(set, &a).unwrap();
            let rb = bank.render(set, &b).unwrap();
            prop_assert_eq!(ra.len(), rb.len());
            for ((ida, ta), (idb, tb)) in ra.iter().zip(&rb) {
                prop_assert_eq!(ida, idb);
                prop_assert_eq!(ta.replace(a.as_str(), "\u{0}"), tb.replace(b.as_str(), "\u{0}"));
            }
        }
    }
}

#[test]
fn store_status_never_moves_backwards() {
    use vlmprobe::orchestrate::{Status, Store};
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    store.register("x", "h").unwrap();
    store.advance("x", Status::Judged).unwrap();
    assert_eq!(store.advance("x", Status::Generated).unwrap(), Status::Judged);
    assert_eq!(store.status("x").unwrap(), Some(Status::Judged));
}
