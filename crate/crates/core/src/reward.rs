//! Similarity reward: τ times the mean cosine between a description's text
//! embedding and the unit embeddings of the class images.
//!
//! The mean (not the sum) over images is used so the reward scale does not
//! depend on how many images a class has. The KL part of the reward is
//! applied per token by the trainer, not here.

use serde::{Deserialize, Serialize};

use crate::embedding::{ClassPrototype, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub tau: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { tau: 1.0 }
    }
}

impl RewardConfig {
    pub fn new(tau: f64) -> Result<Self> {
        let cfg = Self { tau };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub value: f64,
    pub class_id: String,
    pub description_id: String,
}

pub fn score_description(
    text_embedding: &EmbeddingVector,
    prototype: &ClassPrototype,
    config: &RewardConfig,
    description_id: &str,
) -> Result<SimilarityScore> {
    config.validate()?;
    if text_embedding.dim() != prototype.dim() {
        return Err(Error::Input(format!(
            "text embedding has dimension {}, prototype {} has {}",
            text_embedding.dim(),
            prototype.class_id,
            prototype.dim()
        )));
    }
    let value = if prototype.vector.iter().all(|&v| v == 0.0) {
        log::warn!("prototype {} is the zero vector; scoring 0", prototype.class_id);
        0.0
    } else {
        config.tau * text_embedding.dot(&prototype.vector)
    };
    Ok(SimilarityScore {
        value,
        class_id: prototype.class_id.clone(),
        description_id: description_id.to_string(),
    })
}

/// Scores each text against the same prototype, preserving order.
/// Description ids are `<prefix><index>`.
pub fn batch_score(
    text_embeddings: &[EmbeddingVector],
    prototype: &ClassPrototype,
    config: &RewardConfig,
    id_prefix: &str,
) -> Result<Vec<SimilarityScore>> {
    text_embeddings
        .iter()
        .enumerate()
        .map(|(i, t)| score_description(t, prototype, config, &format!("{id_prefix}{i}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::build_prototype;

    fn e(i: usize, d: usize) -> EmbeddingVector {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        EmbeddingVector::normalized(v).unwrap()
    }

    #[test]
    fn aligned_and_orthogonal() {
        let cfg = RewardConfig::default();
        let p = build_prototype("c", &[e(0, 3)]).unwrap();
        assert_eq!(score_description(&e(0, 3), &p, &cfg, "d").unwrap().value, 1.0);
        let q = build_prototype("c", &[e(1, 3), e(1, 3)]).unwrap();
        assert_eq!(score_description(&e(0, 3), &q, &cfg, "d").unwrap().value, 0.0);
    }

    #[test]
    fn worked_three_image_example() {
        let diag = EmbeddingVector::normalized(vec![1.0, 1.0]).unwrap();
        let p = build_prototype("c", &[e(0, 2), e(1, 2), diag]).unwrap();
        let s = score_description(&e(0, 2), &p, &RewardConfig::new(2.0).unwrap(), "d").unwrap();
        // brute force: 2 * (cos(e1,e1) + cos(e1,e2) + cos(e1,diag)) / 3
        let expected = 2.0 * (1.0 + 0.0 + 1.0 / 2f64.sqrt()) / 3.0;
        assert!((s.value - expected).abs() < 1e-12);
        assert!((s.value - 1.13807).abs() < 1e-5);
    }

    #[test]
    fn zero_prototype_scores_zero() {
        let v = e(0, 2);
        let neg = EmbeddingVector::normalized(vec![-1.0, 0.0]).unwrap();
        let p = build_prototype("c", &[v.clone(), neg]).unwrap();
        assert_eq!(score_description(&v, &p, &RewardConfig::default(), "d").unwrap().value, 0.0);
    }

    #[test]
    fn errors() {
        let p = build_prototype("c", &[e(0, 3)]).unwrap();
        assert!(matches!(
            score_description(&e(0, 2), &p, &RewardConfig::default(), "d"),
            Err(Error::Input(_))
        ));
        assert!(RewardConfig::new(0.0).is_err());
        assert!(RewardConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn empty_and_singleton_batches() {
        let p = build_prototype("c", &[e(0, 3)]).unwrap();
        let cfg = RewardConfig::default();
        assert!(batch_score(&[], &p, &cfg, "d").unwrap().is_empty());
        let one = batch_score(&[e(0, 3)], &p, &cfg, "d").unwrap();
        assert_eq!(one[0], score_description(&e(0, 3), &p, &cfg, "d0").unwrap());
    }
}
