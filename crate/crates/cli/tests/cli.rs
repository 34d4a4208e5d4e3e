use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dynvocab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynvocab")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = dynvocab(&["gen-data", "--task", "colselect", "--seed", "9", "--set", "n_samples=120", "--out", path(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "run_config.json"] {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f}");
    }
    let lines = fs::read_to_string(a.join("train.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 72);
}

#[test]
fn usage_errors_exit_with_two() {
    let o = dynvocab(&["gen-data", "--no-such-flag", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(dynvocab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dynvocab(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = dynvocab(&["gen-data", "--set", "no_such_key=1", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    let o = dynvocab(&["eval", "--checkpoint", path(&dir.path().join("missing")), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_on_the_toy_config() {
    let o = dynvocab(&["gradcheck"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert_eq!(text.matches(" ok").count(), 3, "{text}");
}

/// One sample used as train, dev and test: training must reproduce it.
#[test]
fn train_then_eval_overfits_one_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = dynvocab(&["gen-data", "--seed", "3", "--set", "n_samples=5", "--set", "entity_min=4", "--set", "entity_max=4", "--out", path(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read_to_string(data.join("train.jsonl")).unwrap().lines().next().unwrap().to_string() + "\n";
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl"] {
        fs::write(data.join(f), &first).unwrap();
    }
    let config = dir.path().join("overfit.cfg");
    fs::write(
        &config,
        "# tiny model, one sample\nd_model = 16\nn_heads = 2\nd_ff = 32\ndropout = 0\n\
         batch_size = 1\nepochs = 150\nlr = 3e-3\nwarmup_steps = 10\neval_every = 50\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = dynvocab(&["train", "--config", path(&config), "--data", path(&data), "--out", path(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("# config: {"));
    assert!(log.contains("step,loss,lr,dev_acc,dev_em"));
    assert!(run.join("checkpoint/manifest.txt").exists());
    assert!(run.join("checkpoints/step-000050/params.bin").exists());

    let ev = dir.path().join("eval");
    let o = dynvocab(&["eval", "--data", path(&data), "--checkpoint", path(&run.join("checkpoint")), "--out", path(&ev)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(ev.join("summary.csv")).unwrap();
    let row = summary.lines().find(|l| l.starts_with("dynamic_vocab,")).unwrap();
    let cols: Vec<&str> = row.split(',').collect();
    assert_eq!((cols[2], cols[3]), ("1.000000", "1.000000"), "{summary}");
    assert!(fs::read_to_string(ev.join("buckets.csv")).unwrap().contains("method,bucket,n,mean_acc,ci_lo,ci_hi"));

    let dec = dir.path().join("decode");
    let o = dynvocab(&["decode", "--data", path(&data), "--checkpoint", path(&run.join("checkpoint")), "--out", path(&dec)]);
    assert!(o.status.success());
    let line = fs::read_to_string(dec.join("decode.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert!(v["output"].as_str().unwrap().starts_with("def main"));

    // A dataset with a different vocabulary is refused.
    let other = dir.path().join("other");
    assert!(dynvocab(&["gen-data", "--task", "colselect", "--set", "n_samples=20", "--out", path(&other)]).status.success());
    let o = dynvocab(&["eval", "--data", path(&other), "--checkpoint", path(&run.join("checkpoint")), "--out", path(&ev)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vocabulary"));
}

#[test]
fn bench_writes_points_on_a_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = dynvocab(&["bench", "--trials", "1", "--ns", "1,2", "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert!(csv.starts_with("# config: "));
    assert_eq!(csv.lines().filter(|l| l.starts_with("dynamic_vocab,") || l.starts_with("append,")).count(), 4);
}
