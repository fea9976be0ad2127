use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const UNK: TokenId = 0;
pub const SEP: TokenId = 1;
pub const EOS: TokenId = 2;
/// First id the model may emit. `<unk>` and `<sep>` are input-only.
pub const FIRST_OUTPUT: TokenId = EOS;

const SPECIALS: [&str; 3] = ["<unk>", "<sep>", "<eos>"];
const CLOSING_PUNCT: &[&str] = &[".", ",", "?", "!", ";", ":"];

/// Lowercased word and punctuation tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Closed word-level vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { vocab, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

impl Tokenizer {
    /// Vocabulary of every token appearing in `texts`, sorted, after the
    /// special tokens.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let vocab = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect::<Vec<_>>();
        Self::from(vocab)
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.vocab[id]
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Strict encoding: unknown words are an error.
    pub fn encode_known(&self, text: &str) -> Result<Vec<TokenId>> {
        split_words(text)
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Input(format!("word {w:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Joins tokens, stopping at `<eos>`. Closing punctuation attaches to the
    /// preceding word so `encode(decode(ids)) == ids` for emitted tokens.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            let w = self.word(id);
            if !out.is_empty() && !CLOSING_PUNCT.contains(&w) {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_and_decode() {
        assert_eq!(split_words("It has Striped fur."), vec!["it", "has", "striped", "fur", "."]);
        let tok = Tokenizer::from_texts(["it has striped fur.", "where?"]);
        assert_eq!(tok.word(UNK), "<unk>");
        assert_eq!(tok.word(EOS), "<eos>");
        let ids = tok.encode("it has striped fur.");
        assert_eq!(tok.decode(&ids), "it has striped fur.");
        assert_eq!(tok.encode(&tok.decode(&ids)), ids);
        assert_eq!(tok.encode("zebra"), vec![UNK]);
        assert!(tok.encode_known("zebra").is_err());
    }

    #[test]
    fn decode_stops_at_eos() {
        let tok = Tokenizer::from_texts(["a b"]);
        let a = tok.id("a").unwrap();
        assert_eq!(tok.decode(&[a, EOS, a]), "a");
    }

    #[test]
    fn serde_round_trip() {
        let tok = Tokenizer::from_texts(["x y z"]);
        let back: Tokenizer = serde_json::from_str(&serde_json::to_string(&tok).unwrap()).unwrap();
        assert_eq!(back, tok);
    }
}
