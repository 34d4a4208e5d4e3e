use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dynvocab::bench::{bench_scaling, BenchGrid};
use dynvocab::checkpoint::{self, Checkpoint};
use dynvocab::data::{load_jsonl, save_jsonl, Sample, Split, TaskKind};
use dynvocab::eval::report::{bucket_csv, bucketed, summary_csv};
use dynvocab::eval::{score, Baseline, Prediction, Summary};
use dynvocab::experiment::{predict, train_dynamic, train_plain, Corpus, RunConfig};
use dynvocab::gradcheck::toy_suite;
use dynvocab::model::{Model, Variant};
use dynvocab::train::{log_csv, LogRow, LOG_HEADER};

/// Dynamic-vocabulary entity generation: data, training, evaluation and benchmarks.
#[derive(Parser)]
#[command(name = "dynvocab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write train/dev/test JSONL.
    GenData(Common),
    /// Train a model and write checkpoints and the training log.
    Train(TrainArgs),
    /// Score a checkpoint on a split and write bucket and summary CSVs.
    Eval(EvalArgs),
    /// Decode a split with a checkpoint and write JSONL predictions.
    Decode(EvalArgs),
    /// Time decoding against the number of entities for both methods.
    Bench(BenchArgs),
    /// Finite-difference gradient check of the full model on a toy instance.
    Gradcheck(GradArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    baseline: Option<Baseline>,
    /// Entities appended by the top-k baseline.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    /// Any other configuration key, as `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory with train/dev/test JSONL (generated from the config when absent).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dynamic-vocabulary checkpoint whose entity choices feed `our_retrieval`.
    #[arg(long)]
    retriever_checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Trials per grid point (median is reported).
    #[arg(long, default_value_t = 5)]
    trials: usize,
    /// Comma-separated entity counts.
    #[arg(long, default_value = "8,16,32,64,128")]
    ns: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradArgs {
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

impl Common {
    /// Configuration from `--config` (or the defaults), then the flags.
    fn run_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::from_kv(&text)?
            }
            None => RunConfig::from_kv("")?,
        };
        self.apply(base)
    }

    fn apply(&self, mut run: RunConfig) -> Result<RunConfig> {
        if let Some(t) = self.task {
            run.set("task", &t.to_string())?;
        }
        if let Some(s) = self.seed {
            run.set_seed(s);
        }
        if let Some(v) = self.variant {
            run.variant = v;
        }
        if let Some(b) = self.baseline {
            run.baseline = b;
        }
        if let Some(k) = self.k {
            run.k = k;
        }
        if let Some(b) = self.beam {
            run.beam = b;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            run.set(k.trim(), v.trim())?;
        }
        run.validate()?;
        Ok(run)
    }
}

fn config_json(run: &RunConfig) -> Result<String> {
    Ok(serde_json::to_string(run)?)
}

/// CSV body preceded by a `#` line carrying the producing configuration.
fn write_csv(path: &Path, run: &RunConfig, body: &str) -> Result<()> {
    fs::write(path, format!("# config: {}\n{body}", config_json(run)?)).with_context(|| format!("writing {}", path.display()))
}

fn write_run_config(dir: &Path, run: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run_config.json"), serde_json::to_string_pretty(run)? + "\n")?;
    Ok(())
}

fn load_split(dir: &Path) -> Result<Split> {
    let part = |name: &str| -> Result<Vec<Sample>> {
        let p = dir.join(format!("{name}.jsonl"));
        load_jsonl(&p).with_context(|| format!("loading {}", p.display()))
    };
    Ok(Split { train: part("train")?, dev: part("dev")?, test: part("test")? })
}

fn corpus(run: &RunConfig, data: Option<&Path>) -> Result<Corpus> {
    Ok(match data {
        Some(d) => Corpus::from_split(load_split(d)?),
        None => Corpus::generate(&run.task)?,
    })
}

fn gen_data(c: &Common) -> Result<()> {
    let run = c.run_config()?;
    let corpus = Corpus::generate(&run.task)?;
    write_run_config(&c.out, &run)?;
    for (name, part) in ["train", "dev", "test"].iter().zip(corpus.split.parts()) {
        save_jsonl(part, &c.out.join(format!("{name}.jsonl")))?;
    }
    println!(
        "wrote {} train, {} dev, {} test samples to {}",
        corpus.split.train.len(),
        corpus.split.dev.len(),
        corpus.split.test.len(),
        c.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let run = a.common.run_config()?;
    let out = &a.common.out;
    let corpus = corpus(&run, a.data.as_deref())?;
    write_run_config(out, &run)?;
    let meta = config_json(&run)?;
    let log_path = out.join("train_log.csv");
    let mut log_text = format!("# config: {meta}\n{LOG_HEADER}\n");
    fs::write(&log_path, &log_text)?;
    let mut on_eval = |m: &Model<f32>, row: &LogRow| -> dynvocab::Result<()> {
        log_text.push_str(&row.csv());
        log_text.push('\n');
        fs::write(&log_path, &log_text)?;
        checkpoint::save(&out.join("checkpoints").join(format!("step-{:06}", row.step)), m, &corpus.vocab, Some(&meta))
    };
    let (model, logs) = if run.baseline == Baseline::None {
        train_dynamic(&corpus, &run, &mut on_eval)?
    } else {
        let (m, o) = train_plain(&corpus, &run, run.baseline, &mut on_eval)?;
        (m, vec![o])
    };
    checkpoint::save(&out.join("checkpoint"), &model, &corpus.vocab, Some(&meta))?;
    let rows: Vec<LogRow> = logs.iter().flat_map(|o| o.log.iter().cloned()).collect();
    write_csv(&log_path, &run, &log_csv(&rows))?;
    let last = logs.last().expect("at least one phase");
    println!(
        "kept step {} (dev acc {:.4}, em {:.4}); checkpoint in {}",
        last.best_step,
        last.best_dev_acc,
        last.best_dev_em,
        out.join("checkpoint").display()
    );
    Ok(())
}

fn load_checked(path: &Path, corpus: &Corpus) -> Result<Checkpoint> {
    let ck = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ck.vocab.hash() != corpus.vocab.hash() {
        bail!("checkpoint {} was trained with a different vocabulary than this dataset", path.display());
    }
    Ok(ck)
}

/// The checkpoint's own configuration unless `--config` is given, with the
/// flags applied on top.
fn eval_config(a: &EvalArgs, ck_meta: Option<&str>) -> Result<RunConfig> {
    match (&a.common.config, ck_meta) {
        (None, Some(meta)) => a.common.apply(serde_json::from_str(meta).context("checkpoint metadata")?),
        _ => a.common.run_config(),
    }
}

fn predictions(a: &EvalArgs) -> Result<(RunConfig, Vec<Sample>, Vec<Prediction>)> {
    let meta = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?.meta;
    let run = eval_config(a, meta.as_deref())?;
    let corpus = corpus(&run, a.data.as_deref())?;
    let ck = load_checked(&a.checkpoint, &corpus)?;
    let samples = match a.split.as_str() {
        "train" => corpus.split.train.clone(),
        "dev" => corpus.split.dev.clone(),
        "test" => corpus.split.test.clone(),
        s => bail!("unknown split {s:?} (expected train, dev or test)"),
    };
    let baseline = if ck.model.retriever.is_some() { Baseline::None } else { run.baseline };
    if ck.model.retriever.is_none() && baseline == Baseline::None {
        bail!("{} holds a plain generator; pass --baseline", a.checkpoint.display());
    }
    let dynamic = match (baseline, &a.retriever_checkpoint) {
        (Baseline::OurRetrieval, Some(p)) => {
            let dyn_ck = load_checked(p, &corpus)?;
            Some(predict(&corpus, &samples, &dyn_ck.model, Baseline::None, &run, None)?)
        }
        (Baseline::OurRetrieval, None) => bail!("our_retrieval needs --retriever-checkpoint"),
        _ => None,
    };
    let preds = predict(&corpus, &samples, &ck.model, baseline, &run, dynamic.as_deref())?;
    let mut run = run;
    run.baseline = baseline;
    Ok((run, samples, preds))
}

fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut s = String::new();
    for p in preds {
        let line = serde_json::json!({
            "sample_id": p.sample_id,
            "output": p.output,
            "entities_used": p.entities_used,
            "score": p.score,
        });
        s.push_str(&line.to_string());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (run, samples, preds) = predictions(a)?;
    let out = &a.common.out;
    write_run_config(out, &run)?;
    let scores = score(&samples, &preds)?;
    let method = run.baseline.to_string();
    let method = if method == "none" { "dynamic_vocab".to_string() } else { method };
    let buckets = bucketed(&method, &scores, run.seed);
    write_csv(&out.join("buckets.csv"), &run, &bucket_csv(&buckets))?;
    let summary = Summary::of(&method, &scores);
    let mut body = String::from("# topk similarity: tf-idf cosine over descriptions\n");
    body.push_str(&summary_csv(std::slice::from_ref(&summary)));
    write_csv(&out.join("summary.csv"), &run, &body)?;
    write_predictions(&out.join("predictions.jsonl"), &preds)?;
    println!("{method}: n={} acc={:.4} em={:.4} chrf={:.4}", summary.n, summary.acc, summary.em, summary.chrf);
    Ok(())
}

fn decode(a: &EvalArgs) -> Result<()> {
    let (run, _, preds) = predictions(a)?;
    write_run_config(&a.common.out, &run)?;
    let path = a.common.out.join("decode.jsonl");
    write_predictions(&path, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), path.display());
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let ns = a
        .ns
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad entity count {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    let grid = BenchGrid { ns, trials: a.trials, seed: a.seed.unwrap_or(0), ..BenchGrid::default() };
    let report = bench_scaling(&grid)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("bench.csv"), format!("# config: {}\n{}", serde_json::to_string(&grid)?, report.csv()))?;
    fs::write(a.out.join("bench_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("slope dynamic_vocab {:.3}, append {:.3}", report.dynamic_slope, report.append_slope);
    for m in &report.non_monotone {
        println!("warning: {m} timings decrease more than once along the grid");
    }
    Ok(())
}

fn gradcheck(a: &GradArgs) -> Result<bool> {
    let mut ok = true;
    for (variant, rep) in toy_suite(a.h)? {
        let err = rep.max_rel_err();
        let pass = err <= a.tolerance;
        ok &= pass;
        println!("{variant}: {} coordinates, max rel err {err:.3e} {}", rep.coordinates(), if pass { "ok" } else { "FAIL" });
        if !pass {
            for p in rep.params.iter().filter(|p| p.rel_err > a.tolerance) {
                println!("  {} rel err {:.3e}", p.name, p.rel_err);
            }
        }
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData(c) => gen_data(c)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Decode(a) => decode(a)?,
        Command::Bench(a) => bench(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
