//! A small causal language model with hand-written gradients.
//!
//! At each position the model sees three vectors: an embedding of the last
//! token, the mean of a second embedding table over the whole context, and a
//! learned embedding of the generation position. They are concatenated, fed
//! through one tanh layer, and projected to logits over the output
//! vocabulary (every token except `<unk>` and `<sep>`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{TokenId, Tokenizer, EOS, FIRST_OUTPUT, SEP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TinyLmConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_positions: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TinyLmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 24,
            hidden_dim: 64,
            max_positions: 16,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    vocab: usize,
    outputs: usize,
    embed: usize,
    hidden: usize,
    positions: usize,
    e_last: usize,
    e_ctx: usize,
    pos: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl Layout {
    fn new(vocab: usize, cfg: &TinyLmConfig) -> Self {
        let outputs = vocab - FIRST_OUTPUT;
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
        let e_last = 0;
        let e_ctx = e_last + vocab * e;
        let pos = e_ctx + vocab * e;
        let w1 = pos + cfg.max_positions * e;
        let b1 = w1 + h * 3 * e;
        let w2 = b1 + h;
        let b2 = w2 + outputs * h;
        let total = b2 + outputs;
        Self {
            vocab,
            outputs,
            embed: e,
            hidden: h,
            positions: cfg.max_positions,
            e_last,
            e_ctx,
            pos,
            w1,
            b1,
            w2,
            b2,
            total,
        }
    }

    fn input_dim(&self) -> usize {
        3 * self.embed
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    last: TokenId,
    context_counts: Vec<(TokenId, usize)>,
    context_len: usize,
    position: usize,
    input: Vec<f64>,
    pub hidden: Vec<f64>,
    /// Log-probabilities over the output vocabulary (index = token − 2).
    pub logprobs: Vec<f64>,
}

impl StepCache {
    pub fn logprob(&self, token: TokenId) -> f64 {
        self.logprobs[token - FIRST_OUTPUT]
    }

    pub fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.logprobs.iter().map(|l| l.exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyLm {
    tokenizer: Tokenizer,
    config: TinyLmConfig,
    params: Vec<f64>,
}

impl TinyLm {
    pub fn new(tokenizer: Tokenizer, config: TinyLmConfig) -> Result<Self> {
        if tokenizer.len() <= FIRST_OUTPUT + 1 {
            return Err(Error::Config("vocabulary has no emittable words".into()));
        }
        if config.embed_dim == 0 || config.hidden_dim == 0 || config.max_positions == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let layout = Layout::new(tokenizer.len(), &config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params: Vec<f64> = (0..layout.total)
            .map(|_| rng.gen_range(-1.0..1.0) * config.init_scale)
            .collect();
        params[layout.b1..layout.b1 + layout.hidden].fill(0.0);
        params[layout.b2..layout.total].fill(0.0);
        Ok(Self {
            tokenizer,
            config,
            params,
        })
    }

    fn layout(&self) -> Layout {
        Layout::new(self.tokenizer.len(), &self.config)
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn config(&self) -> &TinyLmConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Prompt tokens followed by the `<sep>` marker.
    pub fn prompt_tokens(&self, prompt: &str) -> Vec<TokenId> {
        let mut ids = self.tokenizer.encode(prompt);
        ids.push(SEP);
        ids
    }

    /// Forward pass for the token at generation `position` given all
    /// preceding tokens.
    pub fn step(&self, context: &[TokenId], position: usize) -> StepCache {
        let l = self.layout();
        let e = l.embed;
        let last = *context.last().expect("context is never empty");
        let mut counts: Vec<(TokenId, usize)> = Vec::new();
        for &t in context {
            match counts.iter_mut().find(|(id, _)| *id == t) {
                Some((_, c)) => *c += 1,
                None => counts.push((t, 1)),
            }
        }
        counts.sort_unstable();
        let n = context.len() as f64;
        let slot = position.min(l.positions - 1);
        let p = &self.params;

        let mut input = vec![0.0; l.input_dim()];
        input[..e].copy_from_slice(&p[l.e_last + last * e..l.e_last + (last + 1) * e]);
        for &(t, c) in &counts {
            let row = &p[l.e_ctx + t * e..l.e_ctx + (t + 1) * e];
            for (x, r) in input[e..2 * e].iter_mut().zip(row) {
                *x += r * c as f64 / n;
            }
        }
        input[2 * e..].copy_from_slice(&p[l.pos + slot * e..l.pos + (slot + 1) * e]);

        let d = l.input_dim();
        let hidden: Vec<f64> = (0..l.hidden)
            .map(|j| {
                let w = &p[l.w1 + j * d..l.w1 + (j + 1) * d];
                (p[l.b1 + j] + w.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>()).tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..l.outputs)
            .map(|o| {
                let w = &p[l.w2 + o * l.hidden..l.w2 + (o + 1) * l.hidden];
                p[l.b2 + o] + w.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        StepCache {
            last,
            context_counts: counts,
            context_len: context.len(),
            position: slot,
            input,
            hidden,
            logprobs: log_softmax(&logits),
        }
    }

    /// Teacher-forced log-probabilities of `generated` after `prompt_ids`.
    pub fn score(&self, prompt_ids: &[TokenId], generated: &[TokenId]) -> Vec<f64> {
        let mut context = prompt_ids.to_vec();
        generated
            .iter()
            .enumerate()
            .map(|(pos, &tok)| {
                let lp = self.step(&context, pos).logprob(tok);
                context.push(tok);
                lp
            })
            .collect()
    }

    /// Accumulates `coeff * d log p(token) / d params` into `grad`.
    pub fn accumulate_logprob_grad(
        &self,
        cache: &StepCache,
        token: TokenId,
        coeff: f64,
        grad: &mut [f64],
    ) {
        let chosen = token - FIRST_OUTPUT;
        let dlogits: Vec<f64> = cache
            .logprobs
            .iter()
            .enumerate()
            .map(|(o, lp)| coeff * (f64::from(u8::from(o == chosen)) - lp.exp()))
            .collect();
        self.backward(cache, &dlogits, grad);
    }

    fn backward(&self, cache: &StepCache, dlogits: &[f64], grad: &mut [f64]) {
        let l = self.layout();
        let (e, h, d) = (l.embed, l.hidden, l.input_dim());
        let p = &self.params;
        let mut dhidden = vec![0.0; h];
        for (o, &g) in dlogits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[l.b2 + o] += g;
            let base = l.w2 + o * h;
            for j in 0..h {
                grad[base + j] += g * cache.hidden[j];
                dhidden[j] += g * p[base + j];
            }
        }
        let mut dinput = vec![0.0; d];
        for j in 0..h {
            let da = dhidden[j] * (1.0 - cache.hidden[j] * cache.hidden[j]);
            if da == 0.0 {
                continue;
            }
            grad[l.b1 + j] += da;
            let base = l.w1 + j * d;
            for k in 0..d {
                grad[base + k] += da * cache.input[k];
                dinput[k] += da * p[base + k];
            }
        }
        let last = l.e_last + cache.last * e;
        for k in 0..e {
            grad[last + k] += dinput[k];
        }
        let n = cache.context_len as f64;
        for &(t, c) in &cache.context_counts {
            let row = l.e_ctx + t * e;
            for k in 0..e {
                grad[row + k] += dinput[e + k] * c as f64 / n;
            }
        }
        let pos = l.pos + cache.position * e;
        for k in 0..e {
            grad[pos + k] += dinput[2 * e + k];
        }
    }

    /// Picks the next token. Temperature 0 is greedy with ties broken toward
    /// the lowest token id.
    pub fn pick(&self, cache: &StepCache, temperature: f64, rng: &mut impl Rng) -> TokenId {
        if temperature <= 0.0 {
            let mut best = 0;
            for (o, lp) in cache.logprobs.iter().enumerate() {
                if *lp > cache.logprobs[best] {
                    best = o;
                }
            }
            return best + FIRST_OUTPUT;
        }
        let scaled: Vec<f64> = cache.logprobs.iter().map(|l| l / temperature).collect();
        let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (o, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return o + FIRST_OUTPUT;
            }
        }
        probs.len() - 1 + FIRST_OUTPUT
    }

    /// Samples up to `max_new_tokens` tokens, stopping after `<eos>`.
    /// Returns the generated ids and their log-probabilities under the model.
    pub fn generate(
        &self,
        prompt_ids: &[TokenId],
        max_new_tokens: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> (Vec<TokenId>, Vec<f64>) {
        let mut context = prompt_ids.to_vec();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        for pos in 0..max_new_tokens {
            let cache = self.step(&context, pos);
            let tok = self.pick(&cache, temperature, rng);
            tokens.push(tok);
            logprobs.push(cache.logprob(tok));
            context.push(tok);
            if tok == EOS {
                break;
            }
        }
        (tokens, logprobs)
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Linear value estimate on the policy's hidden state. The hidden state is
/// treated as a constant, so value updates never move the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueHead {
    params: Vec<f64>,
}

impl ValueHead {
    pub fn new(hidden_dim: usize) -> Self {
        Self {
            params: vec![0.0; hidden_dim + 1],
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn value(&self, hidden: &[f64]) -> f64 {
        let (w, b) = self.params.split_at(hidden.len());
        b[0] + w.iter().zip(hidden).map(|(a, x)| a * x).sum::<f64>()
    }

    /// Adds `coeff * d value / d params`.
    pub fn accumulate_grad(&self, hidden: &[f64], coeff: f64, grad: &mut [f64]) {
        for (g, x) in grad.iter_mut().zip(hidden) {
            *g += coeff * x;
        }
        grad[hidden.len()] += coeff;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TinyLm {
        let tok = Tokenizer::from_texts(["what is a cat ? it is striped . it is spotted ."]);
        TinyLm::new(tok, TinyLmConfig { seed: 3, init_scale: 0.5, ..Default::default() }).unwrap()
    }

    #[test]
    fn logprobs_normalize() {
        let m = model();
        let ctx = m.prompt_tokens("what is a cat?");
        let c = m.step(&ctx, 0);
        let total: f64 = c.probs().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(c.logprobs.len(), m.tokenizer().len() - 2);
    }

    /// Finite-difference check of the analytic log-prob gradient.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = model();
        let ctx = m.prompt_tokens("what is a cat? it");
        let token = m.tokenizer().id("striped").unwrap();
        let cache = m.step(&ctx, 2);
        let mut grad = vec![0.0; m.num_params()];
        m.accumulate_logprob_grad(&cache, token, 1.0, &mut grad);
        let h = 1e-6;
        let mut checked = 0;
        for i in (0..m.num_params()).step_by(37) {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let up = m.step(&ctx, 2).logprob(token);
            m.params[i] = orig - h;
            let down = m.step(&ctx, 2).logprob(token);
            m.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", grad[i]);
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn greedy_generation_is_deterministic_and_scores_match() {
        let m = model();
        let prompt = m.prompt_tokens("what is a cat?");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, la) = m.generate(&prompt, 5, 0.0, &mut rng);
        let (b, _) = m.generate(&prompt, 5, 0.0, &mut rng);
        assert_eq!(a, b);
        let rescored = m.score(&prompt, &a);
        for (x, y) in la.iter().zip(&rescored) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn value_head_gradient() {
        let mut v = ValueHead::new(3);
        v.params_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.1]);
        let hidden = [0.2, 0.3, -0.4];
        assert!((v.value(&hidden) - (0.1 + 0.1 - 0.3 - 0.8)).abs() < 1e-12);
        let mut g = vec![0.0; 4];
        v.accumulate_grad(&hidden, 2.0, &mut g);
        assert_eq!(g, vec![0.4, 0.6, -0.8, 2.0]);
    }
}
