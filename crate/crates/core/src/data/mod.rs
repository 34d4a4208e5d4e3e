//! Synthetic tasks, the dataset format and the tokenizer.

pub mod colselect;
pub mod funcall;
pub mod sample;
pub mod split;
pub mod task;
pub mod vocab;

pub use colselect::gen_colselect;
pub use funcall::gen_funcall;
pub use sample::{load_jsonl, marker, save_jsonl, Entity, Sample, TargetToken};
pub use split::{split_samples, Split};
pub use task::{NameSimilarity, TaskConfig, TaskKind};
pub use vocab::Vocabulary;

use crate::error::Result;

/// Generates the dataset described by `cfg`.
pub fn generate(cfg: &TaskConfig) -> Result<Vec<Sample>> {
    match cfg.task {
        TaskKind::Funcall => gen_funcall(cfg),
        TaskKind::Colselect => gen_colselect(cfg),
    }
}

/// Levenshtein distance over characters.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let next = (row[j + 1] + 1).min(row[j] + 1).min(diag + usize::from(ca != cb));
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(edit_distance("get_x", "set_x"), 1);
        assert_eq!(edit_distance("same", "same"), 0);
    }
}
