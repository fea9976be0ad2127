//! Word-level tokenizer and the tiny causal language model used as the
//! policy and reference during alignment.

mod model;
mod optim;
mod pretrain;
mod tokenizer;

pub use model::{log_softmax, StepCache, TinyLm, TinyLmConfig, ValueHead};
pub use optim::{clip_grad_norm, Adam};
pub use pretrain::{pretrain, PretrainConfig, PretrainExample};
pub use tokenizer::{split_words, TokenId, Tokenizer, EOS, FIRST_OUTPUT, SEP, UNK};
