//! Baselines, decoding of evaluation sets, and scoring.

pub mod metrics;
pub mod report;
pub mod tfidf;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::sample::Sample;
use crate::data::vocab::{Vocabulary, SEP};
use crate::decode::{beam_search, greedy, DecodeResult, Hypothesis, Stepper};
use crate::error::{Error, Result};
use crate::model::{Example, Model};
use crate::parallel::{par_map, Parallelism};
use crate::tensor::Scalar;
pub use metrics::{chrf, exact_match, mentioned_entities, retrieval_acc};
pub use report::{bucketed, SampleScore, Summary};
pub use tfidf::TfIdf;

/// Which system produces the outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// The dynamic-vocabulary model itself.
    #[default]
    None,
    /// Plain generator that sees only the input.
    InputOnly,
    /// Plain generator with the top-k TF-IDF entities appended to the input.
    Topk,
    /// The top-k generator fed the entities the dynamic model chose.
    OurRetrieval,
    /// Plain generator with the gold entities appended.
    Oracle,
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Baseline::None),
            "input_only" => Ok(Baseline::InputOnly),
            "topk" => Ok(Baseline::Topk),
            "our_retrieval" => Ok(Baseline::OurRetrieval),
            "oracle" => Ok(Baseline::Oracle),
            _ => Err(Error::Config(format!(
                "unknown baseline {s:?} (expected none, input_only, topk, our_retrieval or oracle)"
            ))),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::None => "none",
            Baseline::InputOnly => "input_only",
            Baseline::Topk => "topk",
            Baseline::OurRetrieval => "our_retrieval",
            Baseline::Oracle => "oracle",
        })
    }
}

pub const DEFAULT_K: usize = 7;

/// `input <sep> name : description <sep> ...` for the given entities, in order.
pub fn append_source(s: &Sample, entities: &[usize], vocab: &Vocabulary) -> Vec<usize> {
    let mut ids = vocab.tokenize(&s.input);
    let colon = vocab.id(":");
    for &j in entities {
        let e = &s.entities[j];
        ids.push(SEP);
        ids.extend(vocab.tokenize(&e.name));
        ids.push(colon);
        ids.extend(vocab.tokenize(&e.description));
    }
    ids
}

/// Entities ranked by TF-IDF similarity of their descriptions to the input.
pub fn topk_entities(tfidf: &TfIdf, s: &Sample, k: usize) -> Vec<usize> {
    let docs: Vec<&str> = s.entities.iter().map(|e| e.description.as_str()).collect();
    tfidf.top_k(&s.input, &docs, k)
}

/// Gold entities in order of first reference in the target.
pub fn gold_in_order(s: &Sample) -> Vec<usize> {
    let mut out = Vec::new();
    for t in s.target_tokens().unwrap_or_default() {
        if let crate::data::sample::TargetToken::Entity(j) = t {
            if !out.contains(&j) {
                out.push(j);
            }
        }
    }
    out
}

/// Model output for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub output: String,
    /// Indices of the sample's entities present in the output.
    pub entities_used: BTreeSet<usize>,
    pub score: f64,
    pub finished: bool,
    /// Dynamic ids (entity `j` is `V + j`); plain ids for plain generators.
    pub ids: Vec<usize>,
}

fn run_decoder<T: Scalar>(
    model: &Model<T>,
    src: &[usize],
    descs: &[Vec<usize>],
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    let prep = model.prepare(src, descs, 0)?;
    let stepper = Stepper { model, prep: &prep };
    if beam <= 1 {
        greedy(&stepper, max_len)
    } else {
        beam_search(&stepper, beam, max_len)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::NonFinite("beam search produced no hypothesis".into()))
    }
}

/// Decodes each sample with the dynamic-vocabulary model.
pub fn predict_dynamic<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    vocab: &Vocabulary,
    beam: usize,
    max_len: usize,
    parallelism: Parallelism,
) -> Result<Vec<Prediction>> {
    let c = &model.config;
    par_map(parallelism, samples, |_, s| {
        let ex = Example::dynamic(s, vocab, c.max_seq_len, c.max_entity_len)?;
        let h = run_decoder(model, &ex.src, &ex.descs, beam, max_len)?;
        let ids = h.ids.clone();
        let r = DecodeResult::from_hypothesis(h, vocab, &s.entities)?;
        Ok(Prediction {
            sample_id: s.id.clone(),
            output: r.surface,
            entities_used: r.entities,
            score: r.score,
            finished: r.finished,
            ids,
        })
    })
    .into_iter()
    .collect()
}

/// Decodes each sample with a plain generator from the given source ids;
/// entities are recognized by exact name in the output.
pub fn predict_plain<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    sources: &[Vec<usize>],
    vocab: &Vocabulary,
    beam: usize,
    max_len: usize,
    parallelism: Parallelism,
) -> Result<Vec<Prediction>> {
    if samples.len() != sources.len() {
        return Err(Error::Usage("one source per sample required".into()));
    }
    let pairs: Vec<(&Sample, &Vec<usize>)> = samples.iter().zip(sources).collect();
    let max_src = model.config.max_seq_len;
    par_map(parallelism, &pairs, |_, (s, src)| {
        let src = &src[..src.len().min(max_src)];
        let h = run_decoder(model, src, &[], beam, max_len)?;
        let output = vocab.detokenize(&h.ids);
        let names: Vec<String> = s.entities.iter().map(|e| e.name.clone()).collect();
        Ok(Prediction {
            sample_id: s.id.clone(),
            entities_used: mentioned_entities(&output, &names),
            output,
            score: h.score,
            finished: h.finished,
            ids: h.ids,
        })
    })
    .into_iter()
    .collect()
}

pub fn score(samples: &[Sample], preds: &[Prediction]) -> Result<Vec<SampleScore>> {
    samples
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            let gold = s.gold();
            let surface = s.target_surface()?;
            Ok(SampleScore {
                sample_id: s.id.clone(),
                n_gold: gold.len(),
                acc: retrieval_acc(&p.entities_used, &gold),
                em: exact_match(&p.output, &surface),
                chrf: chrf(&p.output, &surface),
            })
        })
        .collect()
}

/// Mean accuracy (over samples with gold entities) and exact-match rate.
pub fn acc_em(scores: &[SampleScore]) -> (f64, f64) {
    let s = Summary::of("", scores);
    (if s.acc.is_nan() { 0.0 } else { s.acc }, if s.em.is_nan() { 0.0 } else { s.em })
}
