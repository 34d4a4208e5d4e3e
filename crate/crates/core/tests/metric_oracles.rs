//! Metrics and ranking checked against brute-force reimplementations.

use std::collections::BTreeSet;

mod common;

use common::{acc_by_loops, chrf_by_counting, random_text};
use dynvocab::eval::{chrf, exact_match, mentioned_entities, retrieval_acc, TfIdf};
use dynvocab::rng;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn accuracy_matches_brute_force_on_random_sets() {
    let mut r = rng::seeded(11);
    for _ in 0..1000 {
        let pred: Vec<u8> = (0..r.random_range(0..8)).map(|_| r.random_range(0..10)).collect();
        let gold: Vec<u8> = (0..r.random_range(0..6)).map(|_| r.random_range(0..10)).collect();
        let (ps, gs): (BTreeSet<u8>, BTreeSet<u8>) = (pred.iter().copied().collect(), gold.iter().copied().collect());
        assert_eq!(retrieval_acc(&ps, &gs), acc_by_loops(&pred, &gold));
    }
}

#[test]
fn chrf_matches_independent_counter() {
    let mut r = rng::seeded(12);
    let alphabet: Vec<char> = "abcde _(é".chars().collect();
    for _ in 0..200 {
        let (a, b) = (random_text(&mut r, &alphabet, 30), random_text(&mut r, &alphabet, 30));
        let (x, y) = (chrf(&a, &b), chrf_by_counting(&a, &b));
        assert!((x - y).abs() <= 1e-6, "{a:?} vs {b:?}: {x} != {y}");
    }
}

#[test]
fn chrf_extremes_and_em() {
    assert_eq!(chrf("select name from t", "select name from t"), 1.0);
    assert_eq!(chrf("aaa", "bbb"), 0.0);
    assert!(exact_match("a = f ( x )", "a=f(x)"));
    assert!(!exact_match("a = f ( x )", "a = g ( x )"));
}

/// Top-k ranking against a direct cosine over dense term vectors.
#[test]
fn tfidf_ranking_matches_dense_cosine() {
    let words = ["read", "write", "user", "order", "bytes", "open", "close", "sum", "loop", "field"];
    let mut r = rng::seeded(13);
    let sentence = |r: &mut rng::Rng| -> String {
        (0..r.random_range(1..7)).map(|_| words[r.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
    };
    let corpus: Vec<String> = (0..40).map(|_| sentence(&mut r)).collect();
    let tfidf = TfIdf::fit(corpus.iter().map(String::as_str));
    let n = corpus.len() as f64;
    let idf = |w: &str| {
        let df = corpus.iter().filter(|d| d.split(' ').any(|t| t == w)).count() as f64;
        ((1.0 + n) / (1.0 + df)).ln() + 1.0
    };
    let dense = |s: &str| -> Vec<f64> {
        words.iter().map(|w| s.split(' ').filter(|t| t == w).count() as f64 * idf(w)).collect()
    };
    for _ in 0..20 {
        let q = sentence(&mut r);
        let docs: Vec<String> = (0..8).map(|_| sentence(&mut r)).collect();
        let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
        let qv = dense(&q);
        let scores: Vec<f64> = docs
            .iter()
            .map(|d| {
                let dv = dense(d);
                let dot: f64 = qv.iter().zip(&dv).map(|(a, b)| a * b).sum();
                let nq = qv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nd = dv.iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / (nq * nd)
            })
            .collect();
        let got = tfidf.top_k(&q, &refs, 3);
        // Each pick scores at least as high as every document left out.
        for &i in &got {
            for j in (0..docs.len()).filter(|j| !got.contains(j)) {
                assert!(scores[i] >= scores[j] - 1e-12);
            }
        }
        for w in got.windows(2) {
            assert!(scores[w[0]] >= scores[w[1]] - 1e-12);
        }
    }
}

#[test]
fn verbatim_description_ranks_first_and_disjoint_scores_zero() {
    let tfidf = TfIdf::fit(["reads the user", "paint pixels", "sum total"]);
    let docs = ["paint pixels", "reads the user", "zzz"];
    assert_eq!(tfidf.top_k("reads the user", &docs, 1), vec![1]);
    let q = tfidf.vector("reads the user");
    assert_eq!(TfIdf::cosine(&q, &tfidf.vector("paint pixels")), 0.0);
}

/// Entity recovery agrees with a scan over whitespace-separated identifiers.
fn scan_names(text: &str, names: &[String]) -> BTreeSet<usize> {
    let glued = text.replace(" _ ", "_");
    let tokens: Vec<&str> = glued.split(|c: char| !(c.is_alphanumeric() || c == '_')).collect();
    names.iter().enumerate().filter(|(_, n)| tokens.contains(&n.as_str())).map(|(i, _)| i).collect()
}

proptest! {
    #[test]
    fn acc_is_a_fraction_and_permutation_invariant(
        pred in proptest::collection::vec(0u8..12, 0..10),
        gold in proptest::collection::vec(0u8..12, 1..6),
    ) {
        let ps: BTreeSet<u8> = pred.iter().copied().collect();
        let gs: BTreeSet<u8> = gold.iter().copied().collect();
        let a = retrieval_acc(&ps, &gs).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let mut rev = pred.clone();
        rev.reverse();
        rev.extend(pred.iter().copied());
        let rs: BTreeSet<u8> = rev.into_iter().collect();
        prop_assert_eq!(retrieval_acc(&rs, &gs), Some(a));
    }

    #[test]
    fn chrf_is_bounded_and_one_on_identity(s in "[a-c ]{0,20}", t in "[a-c ]{0,20}") {
        let x = chrf(&s, &t);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(chrf(&s, &s), 1.0);
    }

    #[test]
    fn mentioned_entities_match_substring_scan(picks in proptest::collection::vec(0usize..6, 0..5)) {
        let names: Vec<String> =
            ["get_user_row", "get_user_raw", "set_user_row", "do_cart", "to_cart", "ranks"].iter().map(|s| s.to_string()).collect();
        let mut text = String::from("def main ( ctx ) :");
        for (i, &p) in picks.iter().enumerate() {
            let spaced = names[p].replace('_', " _ ");
            text.push_str(&format!(" v{i} = {spaced} ( ctx ) ;"));
        }
        prop_assert_eq!(mentioned_entities(&text, &names), scan_names(&text, &names));
    }
}
