//! Greedy and beam-search decoding over a dynamic vocabulary.

use std::collections::BTreeSet;

use crate::data::sample::Entity;
use crate::data::vocab::{Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{KvCache, Model, Prepared};
use crate::tensor::Scalar;

pub const DEFAULT_MAX_LEN: usize = 128;
pub const DEFAULT_BEAM: usize = 5;

/// Anything that yields next-token log-probabilities for a growing prefix.
pub trait StepModel {
    type State: Clone;
    /// State before any output token, with the distribution of the first token.
    fn start(&self) -> Result<(Self::State, Vec<f64>)>;
    /// Appends `token` and returns the distribution of the token after it.
    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>>;
    /// Token that ends a sequence, if any.
    fn eos(&self) -> Option<usize>;
}

/// A model bound to one prepared sample.
pub struct Stepper<'a, T: Scalar> {
    pub model: &'a Model<T>,
    pub prep: &'a Prepared<T>,
}

impl<T: Scalar> StepModel for Stepper<'_, T> {
    type State = KvCache<T>;

    fn start(&self) -> Result<(KvCache<T>, Vec<f64>)> {
        let mut cache = self.model.empty_cache();
        let lp = self.model.step(self.prep, &mut cache, BOS)?;
        Ok((cache, lp))
    }

    fn step(&self, state: &mut KvCache<T>, token: usize) -> Result<Vec<f64>> {
        self.model.step(self.prep, state, token)
    }

    fn eos(&self) -> Option<usize> {
        Some(EOS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output ids, without BOS and without the final EOS.
    pub ids: Vec<usize>,
    /// Sum of the chosen tokens' log-probabilities (EOS included).
    pub score: f64,
    pub finished: bool,
}

/// First index of the maximum finite entry.
fn argmax(lp: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in lp.iter().enumerate() {
        if x.is_finite() && best.is_none_or(|b| x > lp[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn greedy<M: StepModel>(m: &M, max_len: usize) -> Result<Hypothesis> {
    let (mut state, mut lp) = m.start()?;
    let mut h = Hypothesis { ids: Vec::new(), score: 0.0, finished: false };
    while h.ids.len() < max_len {
        let k = argmax(&lp).ok_or_else(|| Error::NonFinite("no finite next-token probability".into()))?;
        h.score += lp[k];
        if Some(k) == m.eos() {
            h.finished = true;
            break;
        }
        h.ids.push(k);
        if h.ids.len() == max_len {
            break;
        }
        lp = m.step(&mut state, k)?;
    }
    Ok(h)
}

/// Length-unnormalized beam search. Returns the finished hypotheses best
/// first, or the live ones if none finished within `max_len` tokens. Ties
/// break toward the earlier beam and then the lower token id.
pub fn beam_search<M: StepModel>(m: &M, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Usage("beam size must be at least 1".into()));
    }
    let (state, lp) = m.start()?;
    let mut live: Vec<(Hypothesis, M::State, Vec<f64>)> =
        vec![(Hypothesis { ids: Vec::new(), score: 0.0, finished: false }, state, lp)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut capped: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, (h, _, lp)) in live.iter().enumerate() {
            for (k, &x) in lp.iter().enumerate() {
                if x.is_finite() {
                    cands.push((h.score + x, hi, k));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (score, hi, k) in cands {
            let (h, st, _) = &live[hi];
            let mut ids = h.ids.clone();
            if Some(k) == m.eos() {
                finished.push(Hypothesis { ids, score, finished: true });
                continue;
            }
            ids.push(k);
            let hyp = Hypothesis { ids, score, finished: false };
            if hyp.ids.len() >= max_len {
                capped.push(hyp);
                continue;
            }
            let mut st = st.clone();
            let lp = m.step(&mut st, k)?;
            next.push((hyp, st, lp));
        }
        live = next;
        // Scores only decrease as hypotheses grow, so no live one can win.
        let best_live = live.iter().map(|(h, ..)| h.score).fold(f64::NEG_INFINITY, f64::max);
        if finished.iter().any(|h| h.score >= best_live) {
            break;
        }
    }
    let mut out = if finished.is_empty() { capped } else { finished };
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

/// Detokenizes base ids and replaces entity id `V + j` by entity `j`'s name.
pub fn substitute_entities(ids: &[usize], vocab: &Vocabulary, entities: &[Entity]) -> Result<String> {
    let v = vocab.len();
    let mut parts: Vec<&str> = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < v {
            parts.push(vocab.token(id).unwrap_or("<unk>"));
        } else {
            let e = entities
                .get(id - v)
                .ok_or_else(|| Error::Index(format!("entity token {id} has no entity (V = {v})")))?;
            parts.push(&e.name);
        }
    }
    Ok(parts.join(" "))
}

/// Decoded output of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub ids: Vec<usize>,
    pub surface: String,
    /// Indices of the entities whose tokens appear in `ids`.
    pub entities: BTreeSet<usize>,
    pub score: f64,
    pub finished: bool,
}

impl DecodeResult {
    pub fn from_hypothesis(h: Hypothesis, vocab: &Vocabulary, entities: &[Entity]) -> Result<Self> {
        let v = vocab.len();
        let surface = substitute_entities(&h.ids, vocab, entities)?;
        let used = h.ids.iter().filter(|&&i| i >= v).map(|&i| i - v).collect();
        Ok(DecodeResult { ids: h.ids, surface, entities: used, score: h.score, finished: h.finished })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed table: distribution depends only on prefix length.
    struct Table(Vec<Vec<f64>>, Option<usize>);

    impl StepModel for Table {
        type State = usize;
        fn start(&self) -> Result<(usize, Vec<f64>)> {
            Ok((0, self.0[0].clone()))
        }
        fn step(&self, s: &mut usize, _t: usize) -> Result<Vec<f64>> {
            *s += 1;
            Ok(self.0[(*s).min(self.0.len() - 1)].clone())
        }
        fn eos(&self) -> Option<usize> {
            self.1
        }
    }

    #[test]
    fn greedy_stops_at_eos() {
        let l = |p: [f64; 3]| p.iter().map(|x: &f64| x.ln()).collect::<Vec<_>>();
        let t = Table(vec![l([0.1, 0.7, 0.2]), l([0.6, 0.3, 0.1])], Some(0));
        let h = greedy(&t, 10).unwrap();
        assert_eq!(h.ids, vec![1]);
        assert!(h.finished);
        assert!((h.score - (0.7f64.ln() + 0.6f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn greedy_hits_max_len() {
        let t = Table(vec![vec![0.0, -1.0]], None);
        let h = greedy(&t, 4).unwrap();
        assert_eq!(h.ids, vec![0; 4]);
        assert!(!h.finished);
    }

    #[test]
    fn substitution_example() {
        let vocab = Vocabulary::build(["call ()"]);
        let ents = vec![
            Entity { name: "other".into(), description: "x".into() },
            Entity { name: "load_cfg".into(), description: "y".into() },
        ];
        let ids = [vocab.id("call"), vocab.len() + 1, vocab.id("()")];
        assert_eq!(substitute_entities(&ids, &vocab, &ents).unwrap(), "call load_cfg ()");
        assert!(substitute_entities(&[vocab.len() + 2], &vocab, &ents).is_err());
    }
}
