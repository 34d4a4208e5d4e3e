//! Central finite-difference gradient checking in 64-bit.

use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::Graph;
use crate::model::{Example, Model, ModelConfig, Variant};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::rng;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the
    /// checked coordinates; 0 when both are zero.
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn coordinates(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

/// Compares `analytic` against central differences of `loss` with step `h`.
/// At most `max_coords` coordinates per parameter are probed (chosen with
/// `seed`); pass `usize::MAX` to probe everything.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    analytic: &Gradients<f64>,
    h: f64,
    max_coords: usize,
    seed: u64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<f64>,
{
    let mut work = store.clone();
    let mut rng = rng::seeded(seed);
    let mut params = Vec::new();
    for i in 0..store.len() {
        let id = ParamId(i);
        let p = store.get(id);
        if !p.requires_grad {
            continue;
        }
        let n = p.value.numel();
        let coords: Vec<usize> =
            if n <= max_coords { (0..n).collect() } else { sample(&mut rng, n, max_coords).into_vec() };
        let grad = analytic.get_or_zeros(id, store);
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for &c in &coords {
            let orig = work.get(id).value.data()[c];
            work.get_mut(id).value.data_mut()[c] = orig + h;
            let up = loss(&work)?;
            work.get_mut(id).value.data_mut()[c] = orig - h;
            let down = loss(&work)?;
            work.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[c];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let denom = na.sqrt().max(nn.sqrt());
        let rel_err = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        params.push(ParamCheck { name: p.name.clone(), checked: coords.len(), rel_err });
    }
    Ok(GradCheckReport { params })
}

/// Full-model check on a small toy instance (d=8, V=12, three entities with
/// one padded slot) for every retriever variant. Weights are redrawn with a
/// larger spread than the training init so that ReLU and max-pool decisions
/// sit far from their kinks.
pub fn toy_suite(h: f64) -> Result<Vec<(Variant, GradCheckReport)>> {
    let mut out = Vec::new();
    for variant in [Variant::CrossAttention, Variant::NoCrossAttention, Variant::PrependInput] {
        let mut c = ModelConfig::desk(12);
        c.d_model = 8;
        c.n_heads = 2;
        c.d_ff = 16;
        c.dropout = 0.0;
        c.max_seq_len = 16;
        c.max_entity_len = 8;
        let mut m: Model<f64> = Model::new(c, Some(variant), 3)?;
        let mut r = rng::seeded(7);
        let spread = Normal::new(0.0, 0.3).expect("valid std");
        for p in m.params.iter_mut() {
            if p.value.shape().len() == 2 {
                for x in p.value.data_mut() {
                    *x = spread.sample(&mut r);
                }
            }
        }
        let ex = Example { src: vec![5, 6, 7, 8], descs: vec![vec![5, 9], vec![10, 11, 6], vec![7]], tgt: vec![6, 12, 14, 13, 2] };
        let mut g = Graph::new(&m.params);
        let (loss, _) = m.nll_sum(&mut g, &ex, 4)?;
        let grads = g.backward(loss)?;
        let report = check_gradients(&m.params, &grads, h, usize::MAX, 1, |ps| {
            let mut g = Graph::inference(ps);
            let (l, _) = m.nll_sum(&mut g, &ex, 4)?;
            Ok(g.value(l).item())
        })?;
        out.push((variant, report));
    }
    Ok(out)
}
