//! Retrieval accuracy, exact match and character n-gram F-score.

use std::collections::{BTreeSet, HashMap};

use crate::data::vocab::{normalize, split_tokens};

/// `|pred ∩ gold| / |gold|`, or `None` when `gold` is empty (such samples are
/// excluded from accuracy averages).
pub fn retrieval_acc<E: Ord>(pred: &BTreeSet<E>, gold: &BTreeSet<E>) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    Some(gold.intersection(pred).count() as f64 / gold.len() as f64)
}

/// Exact match after tokenizer normalization (token boundaries and spacing).
pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize(pred) == normalize(gold)
}

pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut m = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence-level chrF: character n-grams of orders 1..=6 with whitespace
/// removed, precision and recall averaged uniformly over the orders that
/// occur in both strings, combined as F-beta with beta = 2. Two empty
/// strings score 1; if no order is shared the score is 0.
pub fn chrf(hyp: &str, reference: &str) -> f64 {
    let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    if h.is_empty() && r.is_empty() {
        return 1.0;
    }
    let (mut p_sum, mut r_sum, mut orders) = (0.0, 0.0, 0usize);
    for n in 1..=CHRF_ORDER {
        let (hn, rn) = (char_ngrams(&h, n), char_ngrams(&r, n));
        let (h_total, r_total): (usize, usize) = (hn.values().sum(), rn.values().sum());
        if h_total == 0 || r_total == 0 {
            continue;
        }
        let matched: usize = hn.iter().map(|(g, &c)| c.min(rn.get(g).copied().unwrap_or(0))).sum();
        p_sum += matched as f64 / h_total as f64;
        r_sum += matched as f64 / r_total as f64;
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let (p, r) = (p_sum / orders as f64, r_sum / orders as f64);
    if p + r == 0.0 {
        return 0.0;
    }
    let b2 = CHRF_BETA * CHRF_BETA;
    (1.0 + b2) * p * r / (b2 * p + r)
}

/// Identifiers in decoded text: maximal runs `a _ b _ c` of word tokens joined
/// by `_`, re-glued without spaces (`get_user_row`). Lone words are included.
pub fn identifiers(text: &str) -> Vec<String> {
    let toks = split_tokens(text);
    let is_word = |t: &str| t.chars().all(char::is_alphanumeric);
    let mut out = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        if !is_word(toks[i]) {
            i += 1;
            continue;
        }
        let mut s = toks[i].to_string();
        let mut j = i + 1;
        while j + 1 < toks.len() && toks[j] == "_" && is_word(toks[j + 1]) {
            s.push('_');
            s.push_str(toks[j + 1]);
            j += 2;
        }
        out.push(s);
        i = j;
    }
    out
}

/// Indices of entities whose exact name appears as an identifier in `text`.
pub fn mentioned_entities(text: &str, names: &[String]) -> BTreeSet<usize> {
    let ids: std::collections::HashSet<String> = identifiers(text).into_iter().collect();
    names.iter().enumerate().filter(|(_, n)| ids.contains(&normalize(n).replace(' ', ""))).map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc_examples() {
        let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(retrieval_acc(&s(&[1, 2]), &s(&[2, 3])), Some(0.5));
        assert_eq!(retrieval_acc(&s(&[1]), &s(&[])), None);
        assert_eq!(retrieval_acc(&s(&[]), &s(&[4])), Some(0.0));
    }

    #[test]
    fn chrf_extremes() {
        assert_eq!(chrf("abc def", "abcdef"), 1.0);
        assert_eq!(chrf("xyz", "abc"), 0.0);
        assert_eq!(chrf("", ""), 1.0);
        assert_eq!(chrf("", "a"), 0.0);
        let partial = chrf("select users_city", "select user_city");
        assert!(partial > 0.5 && partial < 1.0);
    }

    #[test]
    fn identifier_runs() {
        assert_eq!(identifiers("a = get _ user _ row ( ctx )"), vec!["a", "get_user_row", "ctx"]);
        let names = vec!["get_user_row".to_string(), "get_user_rows".to_string()];
        assert_eq!(mentioned_entities("x = get _ user _ rows ( y )", &names), BTreeSet::from([1]));
    }

    #[test]
    fn em_ignores_spacing() {
        assert!(exact_match("f(x)", "f ( x )"));
        assert!(!exact_match("f(x)", "f ( y )"));
    }
}
