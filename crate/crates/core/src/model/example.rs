//! Token-id views of samples as consumed by the model.

use crate::data::sample::{Sample, TargetToken};
use crate::data::vocab::{split_tokens, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};

/// One training or evaluation instance in token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    /// Tokenized entity descriptions; empty for a plain generator.
    pub descs: Vec<Vec<usize>>,
    /// Output ids ending with EOS. Entity `j` is id `V + j`.
    pub tgt: Vec<usize>,
}

fn truncate(mut ids: Vec<usize>, max: usize, what: &str, sample: &str) -> Vec<usize> {
    if ids.len() > max {
        log::warn!("sample {sample}: {what} truncated from {} to {max} tokens", ids.len());
        ids.truncate(max);
    }
    ids
}

impl Example {
    /// Dynamic-vocabulary example: entity references become ids `V + j`.
    pub fn dynamic(s: &Sample, vocab: &Vocabulary, max_seq_len: usize, max_entity_len: usize) -> Result<Self> {
        let v = vocab.len();
        let src = truncate(vocab.tokenize(&s.input), max_seq_len, "input", &s.id);
        let mut descs = Vec::with_capacity(s.entities.len());
        for e in &s.entities {
            let z = truncate(vocab.tokenize(&e.description), max_entity_len, "description", &s.id);
            if z.is_empty() {
                return Err(Error::Data(format!("sample {}: entity {} has an empty description", s.id, e.name)));
            }
            descs.push(z);
        }
        let mut tgt = Vec::new();
        for t in s.target_tokens()? {
            match t {
                TargetToken::Word(w) => tgt.push(vocab.id(&w)),
                TargetToken::Entity(j) => {
                    if j >= s.entities.len() {
                        return Err(Error::Data(format!("sample {}: marker {j} out of range", s.id)));
                    }
                    tgt.push(v + j)
                }
            }
        }
        let tgt = finish_target(tgt, max_seq_len, &s.id);
        Ok(Example { src, descs, tgt })
    }

    /// Plain example: `src` as source (e.g. the input with appended entity
    /// text) and entity names spelled out as ordinary tokens in the target.
    pub fn plain(s: &Sample, src: Vec<usize>, vocab: &Vocabulary, max_seq_len: usize) -> Result<Self> {
        let src = truncate(src, max_seq_len, "input", &s.id);
        let tgt = vocab.tokenize(&s.target_surface()?);
        let tgt = finish_target(tgt, max_seq_len, &s.id);
        Ok(Example { src, descs: Vec::new(), tgt })
    }

    /// `[BOS, y_1, ..., y_{n-1}]`: teacher-forcing inputs aligned with `tgt`.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.tgt.len());
        v.push(BOS);
        v.extend_from_slice(&self.tgt[..self.tgt.len() - 1]);
        v
    }
}

fn finish_target(mut tgt: Vec<usize>, max_seq_len: usize, id: &str) -> Vec<usize> {
    if tgt.len() + 1 > max_seq_len {
        log::warn!("sample {id}: target truncated to {max_seq_len} tokens");
        tgt.truncate(max_seq_len - 1);
    }
    tgt.push(EOS);
    tgt
}

/// Number of tokens in the tokenized form of `text`.
pub fn token_len(text: &str) -> usize {
    split_tokens(text).len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample::{marker, Entity};

    fn sample() -> Sample {
        Sample {
            id: "t-0-0".into(),
            input: "reads the user".into(),
            target: format!("call {} ()", marker(1)),
            entities: vec![
                Entity { name: "a_b".into(), description: "open handle".into() },
                Entity { name: "load_cfg".into(), description: "read bytes".into() },
            ],
        }
    }

    #[test]
    fn dynamic_targets_use_entity_ids() {
        let s = sample();
        let vocab = Vocabulary::build(["reads the user call () open handle read bytes load _ cfg a b"]);
        let ex = Example::dynamic(&s, &vocab, 256, 64).unwrap();
        let v = vocab.len();
        assert_eq!(ex.tgt, vec![vocab.id("call"), v + 1, vocab.id("()"), EOS]);
        assert_eq!(ex.decoder_input(), vec![BOS, vocab.id("call"), v + 1, vocab.id("()")]);
        assert_eq!(ex.descs.len(), 2);
    }

    #[test]
    fn plain_targets_spell_names() {
        let s = sample();
        let vocab = Vocabulary::build(["reads the user call () load _ cfg"]);
        let ex = Example::plain(&s, vocab.tokenize(&s.input), &vocab, 256).unwrap();
        let want: Vec<usize> = ["call", "load", "_", "cfg", "()"].iter().map(|t| vocab.id(t)).collect();
        assert_eq!(&ex.tgt[..5], &want[..]);
        assert!(ex.descs.is_empty());
    }

    #[test]
    fn long_descriptions_are_truncated() {
        let mut s = sample();
        s.entities[0].description = "x ".repeat(100);
        let vocab = Vocabulary::build(["x"]);
        let ex = Example::dynamic(&s, &vocab, 256, 64).unwrap();
        assert_eq!(ex.descs[0].len(), 64);
    }
}
