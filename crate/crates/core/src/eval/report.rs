//! Bucketed accuracy with bootstrap confidence intervals, and CSV output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

pub const BUCKETS: [&str; 4] = ["1", "2", "3", "4+"];
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
/// Two-sided coverage of the reported intervals.
pub const CI_LEVEL: f64 = 0.90;

pub fn bucket_of(n_gold: usize) -> Option<&'static str> {
    match n_gold {
        0 => None,
        1 => Some("1"),
        2 => Some("2"),
        3 => Some("3"),
        _ => Some("4+"),
    }
}

/// Scores of one evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub n_gold: usize,
    /// `None` when the sample references no entity.
    pub acc: Option<f64>,
    pub em: bool,
    pub chrf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub method: String,
    pub bucket: String,
    pub n: usize,
    pub mean_acc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Percentile bootstrap interval of the mean at [`CI_LEVEL`].
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut r = rng::derive(seed, &[40]);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[r.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - CI_LEVEL) / 2.0;
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(tail), at(1.0 - tail))
}

/// Per-bucket rows (buckets with at least one sample) followed by an `all` row.
pub fn bucketed(method: &str, scores: &[SampleScore], seed: u64) -> Vec<BucketRow> {
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for b in BUCKETS {
        let accs: Vec<f64> =
            scores.iter().filter(|s| bucket_of(s.n_gold) == Some(b)).filter_map(|s| s.acc).collect();
        all.extend_from_slice(&accs);
        if accs.is_empty() {
            continue;
        }
        let (lo, hi) = bootstrap_ci(&accs, BOOTSTRAP_RESAMPLES, seed);
        rows.push(BucketRow { method: method.into(), bucket: b.into(), n: accs.len(), mean_acc: mean(&accs), ci_lo: lo, ci_hi: hi });
    }
    let (lo, hi) = bootstrap_ci(&all, BOOTSTRAP_RESAMPLES, seed);
    rows.push(BucketRow { method: method.into(), bucket: "all".into(), n: all.len(), mean_acc: mean(&all), ci_lo: lo, ci_hi: hi });
    rows
}

pub fn bucket_csv(rows: &[BucketRow]) -> String {
    let mut s = String::from("method,bucket,n,mean_acc,ci_lo,ci_hi\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.6},{:.6},{:.6}\n", r.method, r.bucket, r.n, r.mean_acc, r.ci_lo, r.ci_hi));
    }
    s
}

/// Corpus-level summary of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub n: usize,
    pub acc: f64,
    pub em: f64,
    pub chrf: f64,
}

impl Summary {
    pub fn of(method: &str, scores: &[SampleScore]) -> Self {
        let accs: Vec<f64> = scores.iter().filter_map(|s| s.acc).collect();
        let ems: Vec<f64> = scores.iter().map(|s| if s.em { 1.0 } else { 0.0 }).collect();
        let chrfs: Vec<f64> = scores.iter().map(|s| s.chrf).collect();
        Summary { method: method.into(), n: scores.len(), acc: mean(&accs), em: mean(&ems), chrf: mean(&chrfs) }
    }
}

pub fn summary_csv(rows: &[Summary]) -> String {
    let mut s = String::from("method,n,acc,em,chrf\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6},{:.6}\n", r.method, r.n, r.acc, r.em, r.chrf));
    }
    s
}
