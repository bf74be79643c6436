use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::{BOS, EOS, PAD, UNK};

pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Whitespace tokenization of lowercased text.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Bijective token ↔ id table with ids 0..4 reserved for PAD, BOS, EOS, UNK.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Frequency-sorted vocabulary (ties alphabetical) truncated to `max_size`
    /// entries including the reserved ones.
    pub fn build<S: AsRef<str>>(texts: &[S], max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in tokenize(t.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        for r in RESERVED {
            counts.remove(r);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        tokens.truncate(max_size.max(RESERVED.len()));
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with single spaces, skipping PAD, BOS and EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_alphabetical() {
        let v = Vocabulary::build(&["b a", "a"], 100);
        assert_eq!(v.tokens(), &["<pad>", "<s>", "</s>", "<unk>", "a", "b"]);
        let v = Vocabulary::build(&["c b", "a"], 100);
        assert_eq!(&v.tokens()[4..], &["a", "b", "c"]);
    }

    #[test]
    fn roundtrip_and_unknowns() {
        let v = Vocabulary::build(&["the cat sat", "the dog"], 100);
        assert_eq!(v.decode(&v.encode("the dog sat")), "the dog sat");
        assert_eq!(v.encode("the zebra")[1], UNK);
        assert_eq!(v.encode("The CAT"), v.encode("the cat"));
    }

    #[test]
    fn truncates_to_size() {
        let v = Vocabulary::build(&["a a a b b c"], 6);
        assert_eq!(v.len(), 6);
        assert!(!v.contains("c"));
    }

    #[test]
    fn serde_as_token_list() {
        let v = Vocabulary::build(&["x y"], 10);
        let s = serde_json::to_string(&v).unwrap();
        assert!(s.starts_with("[\"<pad>\""));
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}
