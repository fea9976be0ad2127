//! The image cache must be invisible in outputs: cold, warm and uncached
//! encodes agree bit for bit, and moving files keeps entries valid.

use std::sync::Arc;

use vlmprobe::embedding::{BackendRegistry, EmbeddingCache, HashProjection};
use vlmprobe::toy::{self, ToyConfig};

fn registry(cache: Option<EmbeddingCache>) -> BackendRegistry {
    let mut r = BackendRegistry::new();
    if let Some(c) = cache {
        r = r.with_cache(c);
    }
    r.register(Arc::new(HashProjection::new("hash", 24, 3).unwrap())).unwrap();
    r.register(Arc::new(toy::keyword_backend("kw", &ToyConfig::default()).unwrap())).unwrap();
    r
}

#[test]
fn cached_and_uncached_encodes_are_identical() {
    let data = tempfile::tempdir().unwrap();
    let cache_dir = tempfile::tempdir().unwrap();
    toy::write_dataset(data.path(), &ToyConfig { train_per_class: 3, test_per_class: 1, ..ToyConfig::default() })
        .unwrap();
    let images: Vec<_> = ["tiger", "leopard", "panther"]
        .iter()
        .flat_map(|c| (0..3).map(move |i| format!("train/{c}/{i:03}.png")))
        .map(|p| data.path().join(p))
        .collect();

    let plain = registry(None);
    let cached = registry(Some(EmbeddingCache::open(cache_dir.path()).unwrap()));
    for backend in ["hash", "kw"] {
        let reference = plain.encode_images(backend, &images).unwrap();
        let cold = cached.encode_images(backend, &images).unwrap();
        let warm = cached.encode_images(backend, &images).unwrap();
        assert_eq!(reference, cold, "{backend}");
        assert_eq!(reference, warm, "{backend}");
    }
    let stats = cached.cache().unwrap().stats();
    assert_eq!(stats.misses, 2 * images.len() as u64);
    assert_eq!(stats.hits, 2 * images.len() as u64);
    assert_eq!(stats.write_failures, 0);

    // same bytes under a new path still hit
    let moved = data.path().join("moved.png");
    std::fs::copy(&images[0], &moved).unwrap();
    let reopened = registry(Some(EmbeddingCache::open(cache_dir.path()).unwrap()));
    let again = reopened.encode_images("hash", &[&moved]).unwrap();
    assert_eq!(again[0], plain.encode_images("hash", &images[..1]).unwrap()[0]);
    assert_eq!(reopened.cache().unwrap().stats().hits, 1);
}

#[test]
fn undecodable_image_reports_its_index() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.png");
    toy::write_dataset(dir.path(), &ToyConfig { train_per_class: 1, test_per_class: 1, ..ToyConfig::default() })
        .unwrap();
    std::fs::copy(dir.path().join("train/tiger/000.png"), &good).unwrap();
    let bad = dir.path().join("bad.png");
    std::fs::write(&bad, b"not an image").unwrap();
    let err = registry(None).encode_images("hash", &[&good, &bad]).unwrap_err();
    match err {
        vlmprobe::Error::Image { index, path, .. } => {
            assert_eq!(index, 1);
            assert_eq!(path, bad);
        }
        other => panic!("unexpected error {other}"),
    }
}
