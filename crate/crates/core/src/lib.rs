pub mod dataset;
pub mod embedding;
pub mod error;
pub mod inspect;
pub mod kl;
pub mod lm;
pub mod orchestrate;
pub mod prompts;
pub mod reward;
pub mod toy;
pub mod trainer;
pub mod zeroshot;

pub use error::{Error, Result};
