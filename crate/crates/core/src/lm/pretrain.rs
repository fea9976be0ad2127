use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::TinyLm;
use super::optim::{clip_grad_norm, Adam};
use super::tokenizer::EOS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub prompt: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            learning_rate: 3e-3,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

/// Maximum-likelihood training on answer tokens (prompt tokens are context
/// only). Returns the mean per-token negative log-likelihood of the last
/// epoch.
pub fn pretrain(model: &mut TinyLm, examples: &[PretrainExample], cfg: &PretrainConfig) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("no pretraining examples".into()));
    }
    let encoded: Vec<(Vec<usize>, Vec<usize>)> = examples
        .iter()
        .map(|ex| {
            let mut answer = model.tokenizer().encode_known(&ex.answer)?;
            answer.push(EOS);
            Ok((model.prompt_tokens(&ex.prompt), answer))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.num_params(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut last_nll = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut nll, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let tokens: usize = batch.iter().map(|&i| encoded[i].1.len()).sum();
            let mut grad = vec![0.0; model.num_params()];
            for &i in batch {
                let (prompt, answer) = &encoded[i];
                let mut ctx = prompt.clone();
                for (pos, &tok) in answer.iter().enumerate() {
                    let cache = model.step(&ctx, pos);
                    nll -= cache.logprob(tok);
                    model.accumulate_logprob_grad(&cache, tok, -1.0 / tokens as f64, &mut grad);
                    ctx.push(tok);
                }
                count += answer.len();
            }
            clip_grad_norm(&mut grad, cfg.max_grad_norm);
            opt.step(model.params_mut(), &grad);
        }
        last_nll = nll / count as f64;
    }
    Ok(last_nll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{TinyLmConfig, Tokenizer};

    #[test]
    fn pretraining_learns_a_fixed_answer() {
        let tok = Tokenizer::from_texts(["what is it ? it is striped ."]);
        let mut m = TinyLm::new(tok, TinyLmConfig::default()).unwrap();
        let ex = vec![PretrainExample { prompt: "what is it?".into(), answer: "it is striped.".into() }];
        let cfg = PretrainConfig { epochs: 200, batch_size: 1, ..Default::default() };
        let nll = pretrain(&mut m, &ex, &cfg).unwrap();
        assert!(nll < 0.05, "nll {nll}");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (ids, _) = m.generate(&m.prompt_tokens("what is it?"), 8, 0.0, &mut rng);
        assert_eq!(m.tokenizer().decode(&ids), "it is striped.");
    }

    #[test]
    fn unknown_words_rejected() {
        let tok = Tokenizer::from_texts(["a b"]);
        let mut m = TinyLm::new(tok, TinyLmConfig::default()).unwrap();
        let ex = vec![PretrainExample { prompt: "a".into(), answer: "zzz".into() }];
        assert!(pretrain(&mut m, &ex, &PretrainConfig::default()).is_err());
    }
}
