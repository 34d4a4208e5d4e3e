//! Pre-norm transformer blocks expressed on a [`Graph`].

use crate::error::Result;
use crate::graph::{AttnSpec, Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncLayerIds {
    pub ln1: NormIds,
    pub attn: AttnIds,
    pub ln2: NormIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub struct DecLayerIds {
    pub ln1: NormIds,
    pub self_attn: AttnIds,
    pub ln2: NormIds,
    pub cross: AttnIds,
    pub ln3: NormIds,
    pub ffn: FfnIds,
}

/// Parameter registration and lookup by name prefix.
pub(crate) struct Builder<'a, T: Scalar, R: rand::Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub d: usize,
    pub d_ff: usize,
    pub std: f64,
}

impl<T: Scalar, R: rand::Rng> Builder<'_, T, R> {
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add_normal(name, &[rows, cols], self.std, self.rng)
    }

    pub fn norm(&mut self, name: &str) -> NormIds {
        let gamma = self.store.add(&format!("{name}.gamma"), Tensor::full(&[self.d], T::one()));
        let beta = self.store.add(&format!("{name}.beta"), Tensor::zeros(&[self.d]));
        NormIds { gamma, beta }
    }

    pub fn attn(&mut self, name: &str) -> AttnIds {
        let d = self.d;
        AttnIds {
            wq: self.matrix(&format!("{name}.wq"), d, d),
            wk: self.matrix(&format!("{name}.wk"), d, d),
            wv: self.matrix(&format!("{name}.wv"), d, d),
            wo: self.matrix(&format!("{name}.wo"), d, d),
        }
    }

    pub fn ffn(&mut self, name: &str) -> FfnIds {
        let (d, f) = (self.d, self.d_ff);
        FfnIds { w1: self.matrix(&format!("{name}.w1"), d, f), w2: self.matrix(&format!("{name}.w2"), f, d) }
    }

    pub fn enc_layer(&mut self, name: &str) -> EncLayerIds {
        EncLayerIds {
            ln1: self.norm(&format!("{name}.ln1")),
            attn: self.attn(&format!("{name}.attn")),
            ln2: self.norm(&format!("{name}.ln2")),
            ffn: self.ffn(&format!("{name}.ffn")),
        }
    }

    pub fn dec_layer(&mut self, name: &str) -> DecLayerIds {
        DecLayerIds {
            ln1: self.norm(&format!("{name}.ln1")),
            self_attn: self.attn(&format!("{name}.self_attn")),
            ln2: self.norm(&format!("{name}.ln2")),
            cross: self.attn(&format!("{name}.cross")),
            ln3: self.norm(&format!("{name}.ln3")),
            ffn: self.ffn(&format!("{name}.ffn")),
        }
    }
}

pub(crate) fn lookup_norm<T: Scalar>(s: &ParamStore<T>, name: &str) -> Result<NormIds> {
    Ok(NormIds { gamma: s.id(&format!("{name}.gamma"))?, beta: s.id(&format!("{name}.beta"))? })
}

pub(crate) fn lookup_attn<T: Scalar>(s: &ParamStore<T>, name: &str) -> Result<AttnIds> {
    Ok(AttnIds {
        wq: s.id(&format!("{name}.wq"))?,
        wk: s.id(&format!("{name}.wk"))?,
        wv: s.id(&format!("{name}.wv"))?,
        wo: s.id(&format!("{name}.wo"))?,
    })
}

pub(crate) fn lookup_ffn<T: Scalar>(s: &ParamStore<T>, name: &str) -> Result<FfnIds> {
    Ok(FfnIds { w1: s.id(&format!("{name}.w1"))?, w2: s.id(&format!("{name}.w2"))? })
}

pub(crate) fn lookup_enc_layer<T: Scalar>(s: &ParamStore<T>, name: &str) -> Result<EncLayerIds> {
    Ok(EncLayerIds {
        ln1: lookup_norm(s, &format!("{name}.ln1"))?,
        attn: lookup_attn(s, &format!("{name}.attn"))?,
        ln2: lookup_norm(s, &format!("{name}.ln2"))?,
        ffn: lookup_ffn(s, &format!("{name}.ffn"))?,
    })
}

pub(crate) fn lookup_dec_layer<T: Scalar>(s: &ParamStore<T>, name: &str) -> Result<DecLayerIds> {
    Ok(DecLayerIds {
        ln1: lookup_norm(s, &format!("{name}.ln1"))?,
        self_attn: lookup_attn(s, &format!("{name}.self_attn"))?,
        ln2: lookup_norm(s, &format!("{name}.ln2"))?,
        cross: lookup_attn(s, &format!("{name}.cross"))?,
        ln3: lookup_norm(s, &format!("{name}.ln3"))?,
        ffn: lookup_ffn(s, &format!("{name}.ffn"))?,
    })
}

pub fn norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, ids: &NormIds) -> Result<Var> {
    let (gamma, beta) = (g.param(ids.gamma), g.param(ids.beta));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

pub fn project<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: ParamId) -> Result<Var> {
    let w = g.param(w);
    g.matmul(x, w)
}

/// `Wo · attention(q Wq, k Wk, v Wv)` with keys and values taken from `kv`.
pub fn multi_head<T: Scalar>(g: &mut Graph<'_, T>, q_in: Var, kv_in: Var, ids: &AttnIds, spec: AttnSpec) -> Result<Var> {
    let q = project(g, q_in, ids.wq)?;
    let k = project(g, kv_in, ids.wk)?;
    let v = project(g, kv_in, ids.wv)?;
    let a = g.attention(q, k, v, spec)?;
    project(g, a, ids.wo)
}

pub fn feed_forward<T: Scalar>(g: &mut Graph<'_, T>, x: Var, ids: &FfnIds) -> Result<Var> {
    let h = project(g, x, ids.w1)?;
    let h = g.relu(h);
    project(g, h, ids.w2)
}

/// Residual add of a dropped-out sublayer output.
fn residual<T: Scalar>(g: &mut Graph<'_, T>, x: Var, sub: Var, dropout: f64) -> Result<Var> {
    let sub = g.dropout(sub, dropout);
    g.add(x, sub)
}

/// Self-attention encoder stack followed by a final layer norm.
pub fn encoder_stack<T: Scalar>(
    g: &mut Graph<'_, T>,
    mut x: Var,
    layers: &[EncLayerIds],
    final_norm: &NormIds,
    spec: &AttnSpec,
    dropout: f64,
) -> Result<Var> {
    for l in layers {
        let h = norm(g, x, &l.ln1)?;
        let a = multi_head(g, h, h, &l.attn, spec.clone())?;
        x = residual(g, x, a, dropout)?;
        let h = norm(g, x, &l.ln2)?;
        let f = feed_forward(g, h, &l.ffn)?;
        x = residual(g, x, f, dropout)?;
    }
    norm(g, x, final_norm)
}

/// Keys and values of one decoder layer, for all positions seen so far.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

/// One decoder layer over the `q` newest positions. With `past`, the cached
/// keys/values of earlier positions are prepended; the returned pair covers
/// every position. `cross_k`/`cross_v` are this layer's projections of the
/// encoder output.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    l: &DecLayerIds,
    x: Var,
    past: Option<&LayerCache<T>>,
    cross_k: Var,
    cross_v: Var,
    enc_valid: &[bool],
    heads: usize,
    dropout: f64,
) -> Result<(Var, Var, Var)> {
    let h = norm(g, x, &l.ln1)?;
    let q = project(g, h, l.self_attn.wq)?;
    let mut k = project(g, h, l.self_attn.wk)?;
    let mut v = project(g, h, l.self_attn.wv)?;
    if let Some(p) = past {
        if p.k.rows() > 0 {
            let pk = g.constant(p.k.clone());
            let pv = g.constant(p.v.clone());
            k = g.concat_rows(pk, k)?;
            v = g.concat_rows(pv, v)?;
        }
    }
    let (ql, kl) = (g.value(q).rows(), g.value(k).rows());
    let a = g.attention(q, k, v, AttnSpec::dense(heads, ql, kl).causal())?;
    let a = project(g, a, l.self_attn.wo)?;
    let x = residual(g, x, a, dropout)?;

    let h = norm(g, x, &l.ln2)?;
    let q = project(g, h, l.cross.wq)?;
    let el = g.value(cross_k).rows();
    let spec = AttnSpec::dense(heads, ql, el).with_key_valid(enc_valid.to_vec());
    let a = g.attention(q, cross_k, cross_v, spec)?;
    let a = project(g, a, l.cross.wo)?;
    let x = residual(g, x, a, dropout)?;

    let h = norm(g, x, &l.ln3)?;
    let f = feed_forward(g, h, &l.ffn)?;
    let x = residual(g, x, f, dropout)?;
    Ok((x, k, v))
}
