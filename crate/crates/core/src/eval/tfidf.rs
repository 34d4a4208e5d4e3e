//! TF-IDF cosine ranking of entity descriptions against an input.

use std::collections::HashMap;

use crate::data::vocab::split_tokens;

fn terms(text: &str) -> impl Iterator<Item = &str> {
    split_tokens(text).into_iter().filter(|t| t.chars().all(char::is_alphanumeric))
}

/// Smoothed inverse document frequencies, `ln((1 + N) / (1 + df)) + 1`.
#[derive(Clone, Debug, Default)]
pub struct TfIdf {
    df: HashMap<String, usize>,
    n_docs: usize,
}

impl TfIdf {
    pub fn fit<'a>(docs: impl IntoIterator<Item = &'a str>) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n_docs = 0;
        for d in docs {
            n_docs += 1;
            let mut seen: Vec<&str> = terms(d).collect();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t.to_string()).or_insert(0) += 1;
            }
        }
        TfIdf { df, n_docs }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(0);
        ((1 + self.n_docs) as f64 / (1 + df) as f64).ln() + 1.0
    }

    /// Raw term count times idf.
    pub fn vector(&self, text: &str) -> HashMap<String, f64> {
        let mut v: HashMap<String, f64> = HashMap::new();
        for t in terms(text) {
            *v.entry(t.to_string()).or_insert(0.0) += 1.0;
        }
        for (t, x) in v.iter_mut() {
            *x *= self.idf(t);
        }
        v
    }

    pub fn cosine(a: &HashMap<String, f64>, b: &HashMap<String, f64>) -> f64 {
        let dot: f64 = a.iter().filter_map(|(t, x)| b.get(t).map(|y| x * y)).sum();
        let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }

    /// Document indices by decreasing similarity to `query`; ties keep the
    /// lower index first.
    pub fn rank(&self, query: &str, docs: &[&str]) -> Vec<usize> {
        let q = self.vector(query);
        let scores: Vec<f64> = docs.iter().map(|d| Self::cosine(&q, &self.vector(d))).collect();
        let mut idx: Vec<usize> = (0..docs.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        idx
    }

    pub fn top_k(&self, query: &str, docs: &[&str], k: usize) -> Vec<usize> {
        let mut r = self.rank(query, docs);
        r.truncate(k);
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_by_overlap_with_stable_ties() {
        let docs = ["red apple", "green pear", "red car", "blue sky"];
        let t = TfIdf::fit(docs);
        assert_eq!(t.rank("apple red", &docs)[..2], [0, 2]);
        // No overlap at all: all zero, index order.
        assert_eq!(t.rank("zzz", &docs), vec![0, 1, 2, 3]);
        assert_eq!(t.top_k("sky", &docs, 1), vec![3]);
    }

    #[test]
    fn rarer_terms_weigh_more() {
        let t = TfIdf::fit(["a b", "a c", "a d"]);
        assert!(t.idf("b") > t.idf("a"));
        assert!(t.idf("unseen") > t.idf("b"));
    }
}
