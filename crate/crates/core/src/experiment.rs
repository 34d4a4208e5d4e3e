//! End-to-end runs: data preparation, training of every system, evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{self, Sample, Split, TaskConfig, Vocabulary};
use crate::decode::DEFAULT_MAX_LEN;
use crate::error::{Error, Result};
use crate::eval::{
    acc_em, append_source, gold_in_order, predict_dynamic, predict_plain, score, topk_entities, Baseline, Prediction,
    TfIdf, DEFAULT_K,
};
use crate::kv;
use crate::model::{Example, Model, ModelConfig, Variant};
use crate::train::{train, LogRow, TrainConfig, TrainOutcome};

/// How the dynamic model's two parts are optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Training {
    /// Generator and retriever updated together from the start.
    #[default]
    Joint,
    /// Generator first (entity names as plain tokens), then retriever
    /// injected and both fine-tuned.
    Separate,
}

impl FromStr for Training {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Training::Joint),
            "separate" => Ok(Training::Separate),
            _ => Err(Error::Config(format!("unknown training mode {s:?} (expected joint or separate)"))),
        }
    }
}

impl fmt::Display for Training {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Training::Joint => "joint",
            Training::Separate => "separate",
        })
    }
}

/// Everything that determines a run. Serialized next to every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    /// `vocab_size` is filled in from the corpus.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub variant: Variant,
    pub baseline: Baseline,
    pub training: Training,
    pub k: usize,
    pub beam: usize,
    pub max_len: usize,
    /// Beam used for dev evaluation during training (1 = greedy).
    pub dev_beam: usize,
    /// Evaluate on at most this many dev samples during training (0 = all).
    pub dev_limit: usize,
}

impl RunConfig {
    pub fn new(task: TaskConfig) -> Self {
        let seed = task.seed;
        RunConfig {
            seed,
            task,
            model: ModelConfig::desk(0),
            train: TrainConfig { seed, ..TrainConfig::default() },
            variant: Variant::default(),
            baseline: Baseline::default(),
            training: Training::default(),
            k: DEFAULT_K,
            beam: crate::decode::DEFAULT_BEAM,
            max_len: DEFAULT_MAX_LEN,
            dev_beam: 1,
            dev_limit: 0,
        }
    }

    /// One seed for data, initialization, shuffling and dropout.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.task.seed = seed;
        self.train.seed = seed;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.set_seed(kv::parse_value(key, value)?),
            "variant" => self.variant = value.parse()?,
            "baseline" => self.baseline = value.parse()?,
            "training" => self.training = value.parse()?,
            "k" => self.k = kv::parse_value(key, value)?,
            "beam" => self.beam = kv::parse_value(key, value)?,
            "max_len" => self.max_len = kv::parse_value(key, value)?,
            "dev_beam" => self.dev_beam = kv::parse_value(key, value)?,
            "dev_limit" => self.dev_limit = kv::parse_value(key, value)?,
            "task" => {
                let kind: data::TaskKind = value.parse()?;
                if kind != self.task.task {
                    let seed = self.task.seed;
                    self.task = match kind {
                        data::TaskKind::Funcall => TaskConfig::funcall(3334, 16, seed),
                        data::TaskKind::Colselect => TaskConfig::colselect(2000, seed),
                    };
                }
            }
            _ => {
                if !(self.model.set(key, value)? || self.train.set(key, value)?) {
                    self.task.set(key, value).map_err(|_| Error::Config(format!("unknown config key {key:?}")))?;
                }
            }
        }
        Ok(())
    }

    /// Defaults for the funcall task, then the file's `key = value` lines.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = RunConfig::new(TaskConfig::funcall(3334, 16, 0));
        for (k, v) in kv::parse(text)? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        if self.beam == 0 || self.dev_beam == 0 || self.k == 0 || self.max_len == 0 {
            return Err(Error::Config("beam, dev_beam, k and max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Generated data with its split, vocabulary and TF-IDF statistics.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub split: Split,
    pub vocab: Vocabulary,
    pub tfidf: TfIdf,
}

impl Corpus {
    pub fn generate(task: &TaskConfig) -> Result<Self> {
        let samples = data::generate(task)?;
        Ok(Self::from_split(data::split_samples(&samples, task.seed)))
    }

    /// Closed vocabulary over every text field of every split; TF-IDF
    /// statistics over the training descriptions.
    pub fn from_split(split: Split) -> Self {
        let mut texts: Vec<&str> = vec![":"];
        for part in split.parts() {
            for s in part {
                texts.push(&s.input);
                texts.push(&s.target);
                for e in &s.entities {
                    texts.push(&e.name);
                    texts.push(&e.description);
                }
            }
        }
        let vocab = Vocabulary::build(texts);
        let tfidf = TfIdf::fit(split.train.iter().flat_map(|s| s.entities.iter().map(|e| e.description.as_str())));
        Corpus { split, vocab, tfidf }
    }

    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig { vocab_size: self.vocab.len(), ..base.clone() }
    }

    /// Plain-generator source ids for `samples` under `baseline`. The
    /// our-retrieval source needs the dynamic model's predictions.
    pub fn sources(
        &self,
        samples: &[Sample],
        baseline: Baseline,
        k: usize,
        dynamic: Option<&[Prediction]>,
    ) -> Result<Vec<Vec<usize>>> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let ents: Vec<usize> = match baseline {
                    Baseline::InputOnly => Vec::new(),
                    Baseline::Topk => topk_entities(&self.tfidf, s, k),
                    Baseline::Oracle => gold_in_order(s),
                    Baseline::OurRetrieval => {
                        let p = dynamic
                            .and_then(|d| d.get(i))
                            .ok_or_else(|| Error::Usage("our_retrieval needs dynamic predictions".into()))?;
                        first_use_order(p, self.vocab.len())
                    }
                    Baseline::None => return Err(Error::Usage("the dynamic model has no plain source".into())),
                };
                Ok(append_source(s, &ents, &self.vocab))
            })
            .collect()
    }
}

/// Entities of a dynamic prediction in order of first use.
fn first_use_order(p: &Prediction, base_vocab: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for &id in &p.ids {
        if id >= base_vocab && !out.contains(&(id - base_vocab)) {
            out.push(id - base_vocab);
        }
    }
    out
}

fn limit(samples: &[Sample], n: usize) -> &[Sample] {
    if n == 0 {
        samples
    } else {
        &samples[..n.min(samples.len())]
    }
}

/// Trains the dynamic-vocabulary model as configured (joint or separate).
pub fn train_dynamic(
    corpus: &Corpus,
    run: &RunConfig,
    mut on_eval: impl FnMut(&Model<f32>, &LogRow) -> Result<()>,
) -> Result<(Model<f32>, Vec<TrainOutcome>)> {
    let mc = corpus.model_config(&run.model);
    let mut model = Model::<f32>::new(mc.clone(), Some(run.variant), run.seed)?;
    let dyn_train: Vec<Example> = corpus
        .split
        .train
        .iter()
        .map(|s| Example::dynamic(s, &corpus.vocab, mc.max_seq_len, mc.max_entity_len))
        .collect::<Result<_>>()?;
    let dev = limit(&corpus.split.dev, run.dev_limit);
    let eval_dyn = |m: &Model<f32>| -> Result<(f64, f64)> {
        let p = predict_dynamic(m, dev, &corpus.vocab, run.dev_beam, run.max_len, run.train.parallelism)?;
        Ok(acc_em(&score(dev, &p)?))
    };
    match run.training {
        Training::Joint => {
            let out = train(&mut model, &dyn_train, &run.train, &eval_dyn, &mut on_eval)?;
            Ok((model, vec![out]))
        }
        Training::Separate => {
            let first = run.train.epochs / 2;
            let mut p1 = run.train.clone();
            p1.epochs = first.max(1);
            let mut p2 = run.train.clone();
            p2.epochs = (run.train.epochs - first).max(1);
            p2.seed = run.train.seed.wrapping_add(1);
            let plain_train: Vec<Example> = corpus
                .split
                .train
                .iter()
                .map(|s| Example::plain(s, append_source(s, &[], &corpus.vocab), &corpus.vocab, mc.max_seq_len))
                .collect::<Result<_>>()?;
            let dev_src = corpus.sources(dev, Baseline::InputOnly, run.k, None)?;
            let eval_plain = |m: &Model<f32>| -> Result<(f64, f64)> {
                let p = predict_plain(m, dev, &dev_src, &corpus.vocab, run.dev_beam, run.max_len, run.train.parallelism)?;
                Ok(acc_em(&score(dev, &p)?))
            };
            let o1 = train(&mut model, &plain_train, &p1, &eval_plain, &mut on_eval)?;
            let o2 = train(&mut model, &dyn_train, &p2, &eval_dyn, &mut on_eval)?;
            Ok((model, vec![o1, o2]))
        }
    }
}

/// Trains a plain generator on `baseline` sources. `our_retrieval` shares the
/// top-k generator, so it trains on top-k sources.
pub fn train_plain(
    corpus: &Corpus,
    run: &RunConfig,
    baseline: Baseline,
    mut on_eval: impl FnMut(&Model<f32>, &LogRow) -> Result<()>,
) -> Result<(Model<f32>, TrainOutcome)> {
    let source_kind = if baseline == Baseline::OurRetrieval { Baseline::Topk } else { baseline };
    let mc = corpus.model_config(&run.model);
    let mut model = Model::<f32>::new(mc.clone(), None, run.seed)?;
    let train_src = corpus.sources(&corpus.split.train, source_kind, run.k, None)?;
    let examples: Vec<Example> = corpus
        .split
        .train
        .iter()
        .zip(&train_src)
        .map(|(s, src)| Example::plain(s, src.clone(), &corpus.vocab, mc.max_seq_len))
        .collect::<Result<_>>()?;
    let dev = limit(&corpus.split.dev, run.dev_limit);
    let dev_src = corpus.sources(dev, source_kind, run.k, None)?;
    let eval = |m: &Model<f32>| -> Result<(f64, f64)> {
        let p = predict_plain(m, dev, &dev_src, &corpus.vocab, run.dev_beam, run.max_len, run.train.parallelism)?;
        Ok(acc_em(&score(dev, &p)?))
    };
    let out = train(&mut model, &examples, &run.train, &eval, &mut on_eval)?;
    Ok((model, out))
}

/// Decodes `samples` with `model` as the system named by `baseline`. The
/// `our_retrieval` system needs the dynamic model's predictions for the same
/// samples.
pub fn predict(
    corpus: &Corpus,
    samples: &[Sample],
    model: &Model<f32>,
    baseline: Baseline,
    run: &RunConfig,
    dynamic: Option<&[Prediction]>,
) -> Result<Vec<Prediction>> {
    let plain = baseline != Baseline::None;
    if plain == model.retriever.is_some() {
        return Err(Error::Usage(format!(
            "baseline {baseline} needs a {} model",
            if plain { "plain" } else { "dynamic-vocabulary" }
        )));
    }
    if plain {
        let src = corpus.sources(samples, baseline, run.k, dynamic)?;
        predict_plain(model, samples, &src, &corpus.vocab, run.beam, run.max_len, run.train.parallelism)
    } else {
        predict_dynamic(model, samples, &corpus.vocab, run.beam, run.max_len, run.train.parallelism)
    }
}
