#![allow(dead_code)]

use dynvocab::decode::StepModel;
use dynvocab::error::Result;
use dynvocab::graph::Graph;
use dynvocab::model::{Example, Model, ModelConfig, Variant};
use dynvocab::rng;
use dynvocab::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const VARIANTS: [Variant; 3] = [Variant::CrossAttention, Variant::NoCrossAttention, Variant::PrependInput];

pub fn toy_config(v: usize) -> ModelConfig {
    let mut c = ModelConfig::desk(v);
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 16;
    c.dropout = 0.0;
    c.max_seq_len = 32;
    c.max_entity_len = 8;
    c
}

/// Toy model whose matrices are redrawn with standard deviation `spread`, so
/// that outputs are far from uniform.
pub fn toy_model<T: Scalar>(v: usize, variant: Option<Variant>, seed: u64, spread: f64) -> Model<T> {
    let mut m = Model::<T>::new(toy_config(v), variant, seed).unwrap();
    let mut r = rng::derive(seed, &[99]);
    let dist = Normal::new(0.0, spread).unwrap();
    for p in m.params.iter_mut() {
        if p.value.shape().len() == 2 {
            for x in p.value.data_mut() {
                *x = T::of(dist.sample(&mut r));
            }
        }
    }
    m
}

/// Random source, descriptions and target over a base vocabulary of `v`
/// (ids below 5 are specials and never drawn).
pub fn random_example(r: &mut impl Rng, v: usize, m: usize) -> Example {
    let n_src = r.random_range(1..8);
    let src: Vec<usize> = (0..n_src).map(|_| r.random_range(5..v)).collect();
    let mut descs = Vec::with_capacity(m);
    for _ in 0..m {
        let n = r.random_range(1..6);
        descs.push((0..n).map(|_| r.random_range(5..v)).collect());
    }
    let n_tgt = r.random_range(1..6);
    let mut tgt: Vec<usize> = (0..n_tgt)
        .map(|_| if m > 0 && r.random_bool(0.4) { v + r.random_range(0..m) } else { r.random_range(5..v) })
        .collect();
    tgt.push(dynvocab::data::vocab::EOS);
    Example { src, descs, tgt }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Decoder states and the entity embeddings computed through the public
/// building blocks, with the dynamic tables assembled by hand.
pub fn states(m: &Model<f64>, ex: &Example) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut g = Graph::inference(&m.params);
    let enc = m.encode(&mut g, &ex.src).unwrap();
    let rz = m.entity_embeddings(&mut g, &enc, &ex.src, &ex.descs).unwrap().map(|r| g.value(r).clone());
    let rows = |t: &Tensor<f64>| -> Vec<Vec<f64>> { (0..t.rows()).map(|i| t.row(i).to_vec()).collect() };
    let ent: Vec<Vec<f64>> = rz.as_ref().map(rows).unwrap_or_default();
    let embed = m.params.get(m.params.id("gen.embed").unwrap()).value.clone();
    let out = m.params.get(m.params.id("gen.out").unwrap()).value.clone();
    let mut e_dyn = embed;
    if let Some(r) = &rz {
        e_dyn = e_dyn.concat_rows(r).unwrap();
    }
    let e = g.constant(e_dyn);
    let h = m.decode_hidden(&mut g, &enc, e, &ex.decoder_input()).unwrap();
    (rows(g.value(h)), rows(&out), ent)
}

/// Per-position NLL `-h.w_y + log(sum_v exp(h.w_v) + sum_k exp(h.r_k))`.
pub fn closed_form(h: &[Vec<f64>], w: &[Vec<f64>], r: &[Vec<f64>], tgt: &[usize]) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    h.iter()
        .zip(tgt)
        .map(|(h, &y)| {
            let logits: Vec<f64> = w.iter().chain(r).map(|row| dot(h, row)).collect();
            -logits[y] + logsumexp(&logits)
        })
        .collect()
}

/// Accuracy by explicit membership loops over plain vectors.
pub fn acc_by_loops(pred: &[u8], gold: &[u8]) -> Option<f64> {
    let mut g: Vec<u8> = gold.to_vec();
    g.sort_unstable();
    g.dedup();
    if g.is_empty() {
        return None;
    }
    let mut hit = 0;
    for x in &g {
        let mut found = false;
        for y in pred {
            if x == y {
                found = true;
            }
        }
        if found {
            hit += 1;
        }
    }
    Some(hit as f64 / g.len() as f64)
}

/// chrF from string slicing and linear scans, no hashing.
pub fn chrf_by_counting(hyp: &str, reference: &str) -> f64 {
    let strip = |s: &str| -> Vec<char> { s.chars().filter(|c| !c.is_whitespace()).collect() };
    let (h, r) = (strip(hyp), strip(reference));
    if h.is_empty() && r.is_empty() {
        return 1.0;
    }
    let grams = |s: &[char], n: usize| -> Vec<String> {
        if s.len() < n {
            return Vec::new();
        }
        (0..=s.len() - n).map(|i| s[i..i + n].iter().collect()).collect()
    };
    let (mut ps, mut rs, mut k) = (0.0, 0.0, 0.0);
    for n in 1..=6 {
        let (hg, mut rg) = (grams(&h, n), grams(&r, n));
        if hg.is_empty() || rg.is_empty() {
            continue;
        }
        let total_r = rg.len();
        let mut matched = 0;
        for g in &hg {
            if let Some(pos) = rg.iter().position(|x| x == g) {
                rg.swap_remove(pos);
                matched += 1;
            }
        }
        ps += matched as f64 / hg.len() as f64;
        rs += matched as f64 / total_r as f64;
        k += 1.0;
    }
    if k == 0.0 {
        return 0.0;
    }
    let (p, r) = (ps / k, rs / k);
    if p + r == 0.0 {
        0.0
    } else {
        5.0 * p * r / (4.0 * p + r)
    }
}

pub fn random_text(r: &mut impl Rng, alphabet: &[char], max: usize) -> String {
    (0..r.random_range(0..max)).map(|_| alphabet[r.random_range(0..alphabet.len())]).collect()
}

/// Next-token distribution drawn afresh for every distinct prefix.
pub struct PrefixTable {
    pub seed: u64,
    /// Number of tokens; the last one is EOS.
    pub n: usize,
}

impl PrefixTable {
    pub fn dist(&self, prefix: &[usize]) -> Vec<f64> {
        let mut labels = vec![prefix.len() as u64];
        labels.extend(prefix.iter().map(|&t| t as u64));
        let mut r = rng::derive(self.seed, &labels);
        let logits: Vec<f64> = (0..self.n).map(|_| r.random_range(-3.0..3.0)).collect();
        let z = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        logits.iter().map(|x| x - z).collect()
    }
}

impl StepModel for PrefixTable {
    type State = Vec<usize>;
    fn start(&self) -> Result<(Vec<usize>, Vec<f64>)> {
        Ok((Vec::new(), self.dist(&[])))
    }
    fn step(&self, state: &mut Vec<usize>, token: usize) -> Result<Vec<f64>> {
        state.push(token);
        Ok(self.dist(state))
    }
    fn eos(&self) -> Option<usize> {
        Some(self.n - 1)
    }
}

/// Two content tokens and EOS; EOS is impossible before three tokens and
/// certain after them.
pub struct ThreeStep(pub u64);

impl ThreeStep {
    pub fn dist(&self, prefix: &[usize]) -> Vec<f64> {
        if prefix.len() == 3 {
            return vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0];
        }
        let table = PrefixTable { seed: self.0, n: 2 };
        let mut lp = table.dist(prefix);
        lp.push(f64::NEG_INFINITY);
        lp
    }
}

impl StepModel for ThreeStep {
    type State = Vec<usize>;
    fn start(&self) -> Result<(Vec<usize>, Vec<f64>)> {
        Ok((Vec::new(), self.dist(&[])))
    }
    fn step(&self, state: &mut Vec<usize>, token: usize) -> Result<Vec<f64>> {
        state.push(token);
        Ok(self.dist(state))
    }
    fn eos(&self) -> Option<usize> {
        Some(2)
    }
}

/// All eight completions of a [`ThreeStep`] toy with their scores, best first.
pub fn three_step_enumeration(t: &ThreeStep) -> Vec<(Vec<usize>, f64)> {
    let mut all: Vec<(Vec<usize>, f64)> = (0..8usize)
        .map(|code| {
            let ids = vec![code >> 2 & 1, code >> 1 & 1, code & 1];
            let score: f64 = (0..3).map(|i| t.dist(&ids[..i])[ids[i]]).sum();
            (ids, score)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1));
    all
}
