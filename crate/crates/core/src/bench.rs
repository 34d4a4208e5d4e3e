//! Decode-time scaling in the number of entities: dynamic vocabulary versus
//! appending every entity description to the input.

use std::fmt;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::SEP;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DynamicVocab,
    Append,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::DynamicVocab => "dynamic_vocab",
            Method::Append => "append",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchGrid {
    /// Input length.
    pub t: usize,
    /// Description length.
    pub l: usize,
    /// Output length (decode steps).
    pub n_out: usize,
    /// Entity counts, ascending.
    pub ns: Vec<usize>,
    pub trials: usize,
    pub warmups: usize,
    pub seed: u64,
}

impl Default for BenchGrid {
    fn default() -> Self {
        BenchGrid { t: 64, l: 32, n_out: 32, ns: vec![8, 16, 32, 64, 128], trials: 5, warmups: 2, seed: 0 }
    }
}

impl BenchGrid {
    pub fn validate(&self) -> Result<()> {
        if self.ns.len() < 2 || self.ns.windows(2).any(|w| w[0] >= w[1]) || self.ns[0] == 0 {
            return Err(Error::Config("entity counts must be positive and strictly ascending".into()));
        }
        if self.t == 0 || self.l == 0 || self.n_out == 0 || self.trials == 0 {
            return Err(Error::Config("t, l, n_out and trials must be positive".into()));
        }
        Ok(())
    }
}

/// Median wall time of decoding one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub method: Method,
    pub n: usize,
    pub t: usize,
    pub l: usize,
    pub n_out: usize,
    pub seconds: f64,
}

pub const POINT_HEADER: &str = "method,n,T,L,N,seconds";

impl BenchPoint {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{},{:.9}", self.method, self.n, self.t, self.l, self.n_out, self.seconds)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub grid: BenchGrid,
    pub points: Vec<BenchPoint>,
    pub dynamic_slope: f64,
    pub append_slope: f64,
    /// Methods whose median times decrease more than once along the grid.
    pub non_monotone: Vec<Method>,
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(POINT_HEADER);
        s.push('\n');
        for p in &self.points {
            s.push_str(&p.csv());
            s.push('\n');
        }
        s
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Usage("slope needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::Usage("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Usage("x values are all equal".into()));
    }
    Ok(sxy / sxx)
}

/// Log-log slope of `seconds` against the entity counts of the whole grid.
pub fn grid_slope(ns: &[usize], seconds: &[f64]) -> Result<f64> {
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    loglog_slope(&xs, seconds)
}

/// Number of places where a later time is smaller than the one before it.
pub fn inversions(seconds: &[f64]) -> usize {
    seconds.windows(2).filter(|w| w[1] < w[0]).count()
}

/// Checks the fitter on exact `c * n` and `c * n^2` data.
pub fn self_check(ns: &[usize]) -> Result<(f64, f64)> {
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let lin: Vec<f64> = xs.iter().map(|x| 3e-4 * x).collect();
    let quad: Vec<f64> = xs.iter().map(|x| 2e-6 * x * x).collect();
    let (a, b) = (grid_slope(ns, &lin)?, grid_slope(ns, &quad)?);
    if (a - 1.0).abs() > 0.05 || (b - 2.0).abs() > 0.05 {
        return Err(Error::NonFinite(format!("slope fitter self-check failed: linear {a}, quadratic {b}")));
    }
    Ok((a, b))
}

/// Smallest nonzero step of the monotonic clock observed over a short probe.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Median seconds per call of `f`, after `warmups` discarded calls. Each
/// trial repeats `f` until it spans at least 20 timer ticks.
pub fn median_time(trials: usize, warmups: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let floor = timer_resolution() * 20;
    for _ in 0..warmups {
        f()?;
    }
    let mut reps = 1u32;
    let mut times = Vec::with_capacity(trials);
    while times.len() < trials {
        let start = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        let el = start.elapsed();
        if el < floor {
            reps *= 2;
            times.clear();
            continue;
        }
        times.push(el.as_secs_f64() / reps as f64);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) })
}

const BENCH_VOCAB: usize = 256;

/// Greedy-style decode of exactly `steps` tokens (no early stop), so the
/// timed work depends only on the shapes.
fn decode_fixed(model: &Model<f32>, src: &[usize], descs: &[Vec<usize>], steps: usize) -> Result<()> {
    let prep = model.prepare(src, descs, 0)?;
    let mut cache = model.empty_cache();
    let mut tok = crate::data::vocab::BOS;
    for _ in 0..steps {
        let lp = model.step(&prep, &mut cache, tok)?;
        tok = lp
            .iter()
            .enumerate()
            .skip(crate::data::vocab::SPECIALS.len())
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("non-empty vocabulary");
    }
    Ok(())
}

/// Times both methods over the grid with untrained models that share the
/// generator weights.
pub fn bench_scaling(grid: &BenchGrid) -> Result<BenchReport> {
    grid.validate()?;
    self_check(&grid.ns)?;
    let n_max = *grid.ns.last().expect("validated");
    let mut config = ModelConfig::desk(BENCH_VOCAB);
    config.dropout = 0.0;
    config.max_entity_len = grid.l;
    config.max_seq_len = (grid.t + n_max * (grid.l + 1)).max(grid.n_out + 1);
    let dynamic = Model::<f32>::new(config.clone(), Some(Variant::CrossAttention), grid.seed)?;
    let append = Model::<f32>::new(config, None, grid.seed)?;
    let mut r = rng::derive(grid.seed, &[50]);
    let lo = crate::data::vocab::SPECIALS.len();
    let mut words = |n: usize| -> Vec<usize> { (0..n).map(|_| r.random_range(lo..BENCH_VOCAB)).collect() };
    let src = words(grid.t);
    let all_descs: Vec<Vec<usize>> = (0..n_max).map(|_| words(grid.l)).collect();

    let mut points = Vec::new();
    for &n in &grid.ns {
        let descs = &all_descs[..n];
        let secs = median_time(grid.trials, grid.warmups, || decode_fixed(&dynamic, &src, descs, grid.n_out))?;
        log::info!("dynamic_vocab n={n}: {secs:.6}s");
        points.push(BenchPoint { method: Method::DynamicVocab, n, t: grid.t, l: grid.l, n_out: grid.n_out, seconds: secs });

        let mut joined = src.clone();
        for d in descs {
            joined.push(SEP);
            joined.extend_from_slice(d);
        }
        let secs = median_time(grid.trials, grid.warmups, || decode_fixed(&append, &joined, &[], grid.n_out))?;
        log::info!("append n={n}: {secs:.6}s");
        points.push(BenchPoint { method: Method::Append, n, t: grid.t, l: grid.l, n_out: grid.n_out, seconds: secs });
    }
    let times = |m: Method| -> Vec<f64> { points.iter().filter(|p| p.method == m).map(|p| p.seconds).collect() };
    let (td, ta) = (times(Method::DynamicVocab), times(Method::Append));
    let non_monotone =
        [(Method::DynamicVocab, &td), (Method::Append, &ta)].into_iter().filter(|(_, t)| inversions(t) > 1).map(|(m, _)| m).collect();
    Ok(BenchReport {
        dynamic_slope: grid_slope(&grid.ns, &td)?,
        append_slope: grid_slope(&grid.ns, &ta)?,
        grid: grid.clone(),
        points,
        non_monotone,
    })
}
