//! Closed word-level vocabulary and the whitespace/punctuation tokenizer.

use std::collections::{BTreeSet, HashMap};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Separator between the input and appended entity text.
pub const SEP: usize = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

/// Splits on whitespace, then into maximal runs of alphanumeric characters and
/// maximal runs of other symbols: `"load_cfg ()"` -> `load`, `_`, `cfg`, `()`.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        let mut prev: Option<bool> = None;
        for (i, ch) in chunk.char_indices() {
            let word = ch.is_alphanumeric();
            if prev.is_some_and(|p| p != word) {
                out.push(&chunk[start..i]);
                start = i;
            }
            prev = Some(word);
        }
        out.push(&chunk[start..]);
    }
    out
}

/// Canonical spacing: tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    split_tokens(text).join(" ")
}

/// Token <-> id bijection with fixed specials `PAD=0, BOS=1, EOS=2, UNK=3`
/// (plus `SEP=4`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary over every token of `texts`, specials first, the rest sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            for tok in split_tokens(t) {
                set.insert(tok.to_string());
            }
        }
        for s in SPECIALS {
            set.remove(s);
        }
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    /// Rebuilds from an id-ordered token list (as persisted in checkpoints).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Data("vocabulary must start with the special tokens".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_tokens(text).into_iter().map(|t| self.id(t)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }

    /// SHA-256 over the id-ordered token list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitting_rules() {
        assert_eq!(split_tokens("call load_cfg ()"), vec!["call", "load", "_", "cfg", "()"]);
        assert_eq!(split_tokens("a=b;  c"), vec!["a", "=", "b", ";", "c"]);
        assert!(split_tokens("").is_empty());
        assert!(split_tokens("   ").is_empty());
    }

    #[test]
    fn specials_are_fixed() {
        let v = Vocabulary::build(["zeta alpha", "beta"]);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(BOS), Some("<bos>"));
        assert_eq!(v.token(EOS), Some("<eos>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
        assert_eq!(v.id("never-seen"), UNK);
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn round_trip_on_normalized_text() {
        let v = Vocabulary::build(["def f ( x ) : return x"]);
        let s = "def f ( x ) : return x";
        assert_eq!(v.detokenize(&v.tokenize(s)), s);
        assert!(v.tokenize("").is_empty());
    }

    #[test]
    fn hash_tracks_contents() {
        let a = Vocabulary::build(["a b"]);
        let b = Vocabulary::build(["a c"]);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), Vocabulary::from_tokens(a.tokens().to_vec()).unwrap().hash());
    }
}
