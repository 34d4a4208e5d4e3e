//! Mini-batch training with Adam, warmup + cosine decay and periodic dev
//! evaluation.
//!
//! Per-sample gradients of a batch are computed independently (optionally on
//! the rayon pool) and summed in sample order, so a run is bit-identical for
//! a given seed whatever the parallelism setting.

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kv;
use crate::model::{Example, Model};
use crate::optim::{adam_step, clip_global_norm, cosine_lr, AdamState};
use crate::parallel::{par_map, Parallelism};
use crate::param::{Gradients, ParamStore};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub warmup_steps: usize,
    pub eval_every: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 10,
            max_steps: None,
            lr: 1e-3,
            warmup_steps: 100,
            eval_every: 200,
            clip_norm: 1.0,
            seed: 0,
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, epochs and eval_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = kv::parse_value(key, value)?,
            "epochs" => self.epochs = kv::parse_value(key, value)?,
            "max_steps" => self.max_steps = Some(kv::parse_value(key, value)?),
            "lr" => self.lr = kv::parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = kv::parse_value(key, value)?,
            "eval_every" => self.eval_every = kv::parse_value(key, value)?,
            "clip_norm" => self.clip_norm = kv::parse_value(key, value)?,
            "train_seed" => self.seed = kv::parse_value(key, value)?,
            "parallelism" => {
                self.parallelism = match value {
                    "sequential" => Parallelism::Sequential,
                    "rayon" => Parallelism::Rayon,
                    _ => return Err(Error::Config(format!("unknown parallelism {value:?}"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Optimizer steps for a training set of `n` examples.
    pub fn total_steps(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size);
        let all = per_epoch * self.epochs;
        self.max_steps.map_or(all, |m| m.min(all))
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    /// Mean token NLL over the steps since the previous row.
    pub loss: f64,
    pub lr: f64,
    pub dev_acc: f64,
    pub dev_em: f64,
}

pub const LOG_HEADER: &str = "step,loss,lr,dev_acc,dev_em";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{:.6},{:.6e},{:.6},{:.6}", self.step, self.loss, self.lr, self.dev_acc, self.dev_em)
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    /// Step whose parameters were kept (best dev accuracy, then EM).
    pub best_step: usize,
    pub best_dev_acc: f64,
    pub best_dev_em: f64,
    pub steps: usize,
}

/// Dev-set scorer used at every evaluation point: `(accuracy, exact match)`.
pub type Evaluator<'a> = dyn Fn(&Model<f32>) -> Result<(f64, f64)> + Sync + 'a;

/// Gradient of the summed token NLL of `batch` (not yet normalized) and the
/// loss sum and token count. Entity slots are padded to the batch maximum.
pub fn batch_gradients(
    model: &Model<f32>,
    batch: &[&Example],
    dropout_seed: u64,
    parallelism: Parallelism,
) -> Result<(Gradients<f32>, f64, usize)> {
    let pad = batch.iter().map(|e| e.descs.len()).max().unwrap_or(0);
    let results = par_map(parallelism, batch, |i, ex| -> Result<(Gradients<f32>, f64, usize)> {
        let mut g = Graph::training(&model.params, rng::derive(dropout_seed, &[i as u64]));
        let (loss, n) = model.nll_sum(&mut g, ex, pad)?;
        let grads = g.backward(loss)?;
        Ok((grads, g.value(loss).item() as f64, n))
    });
    let mut total = Gradients::new(model.params.len());
    let (mut loss, mut tokens) = (0.0, 0);
    for r in results {
        let (g, l, n) = r?;
        total.merge(&g);
        loss += l;
        tokens += n;
    }
    Ok((total, loss, tokens))
}

/// Trains `model` in place on `train`, evaluating with `eval` every
/// `eval_every` steps and at the end. The parameters with the best dev score
/// are restored before returning. `on_eval` sees every log row.
pub fn train(
    model: &mut Model<f32>,
    train: &[Example],
    cfg: &TrainConfig,
    eval: &Evaluator<'_>,
    mut on_eval: impl FnMut(&Model<f32>, &LogRow) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let total = cfg.total_steps(train.len());
    let mut adam = AdamState::new(&model.params);
    let mut log = Vec::new();
    let mut best: Option<(f64, f64, usize, ParamStore<f32>)> = None;
    let (mut run_loss, mut run_tokens) = (0.0f64, 0usize);
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::derive(cfg.seed, &[20, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let dropout_seed = rng::derive(cfg.seed, &[21, step as u64]).next_u64();
            let (mut grads, loss, tokens) = batch_gradients(model, &batch, dropout_seed, cfg.parallelism)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became {loss} at step {} (epoch {epoch}); lower the learning rate",
                    step + 1
                )));
            }
            grads.scale(1.0 / tokens as f32);
            clip_global_norm(&mut grads, cfg.clip_norm);
            step += 1;
            let lr = cosine_lr(step, total, cfg.lr, cfg.warmup_steps);
            adam_step(&mut model.params, &grads, &mut adam, lr);
            run_loss += loss;
            run_tokens += tokens;
            if step % cfg.eval_every == 0 || step == total {
                let (dev_acc, dev_em) = eval(model)?;
                let row = LogRow { step, loss: run_loss / run_tokens.max(1) as f64, lr, dev_acc, dev_em };
                (run_loss, run_tokens) = (0.0, 0);
                log::info!("step {step}/{total} loss {:.4} dev acc {dev_acc:.4} em {dev_em:.4}", row.loss);
                on_eval(model, &row)?;
                log.push(row);
                if best.as_ref().is_none_or(|(a, e, ..)| (dev_acc, dev_em) > (*a, *e)) {
                    best = Some((dev_acc, dev_em, step, model.params.clone()));
                }
            }
        }
    }
    let (best_dev_acc, best_dev_em, best_step, params) = best.expect("at least one evaluation");
    model.params = params;
    Ok(TrainOutcome { log, best_step, best_dev_acc, best_dev_em, steps: step })
}
