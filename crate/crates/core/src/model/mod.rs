//! Encoder-decoder generator with a per-sample dynamic vocabulary, and the
//! entity retriever that produces the extra vocabulary rows.
//!
//! For a sample with entities `z_1..z_M`, the retriever yields `r(Z)` with one
//! row per entity. The decoder's input embedding table is `[E_orig; r(Z)]` and
//! its output projection is `[W_out; r(Z)]`, so token `V + j` both reads and
//! scores entity `j` through the same row.

mod config;
pub mod example;
pub mod layers;

pub use config::{ModelConfig, Variant};
pub use example::Example;
pub use layers::LayerCache;

use std::ops::Range;

use crate::data::vocab::SEP;
use crate::error::{Error, Result};
use crate::graph::{AttnSpec, Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::{positional_encoding, Scalar, Tensor};
use layers::{
    decoder_layer, encoder_stack, lookup_attn, lookup_dec_layer, lookup_enc_layer, lookup_norm, multi_head, norm,
    project, AttnIds, Builder, DecLayerIds, EncLayerIds, NormIds,
};

#[derive(Clone, Debug)]
struct RetrieverIds {
    embed: ParamId,
    layers: Vec<EncLayerIds>,
    norm: NormIds,
    cross: AttnIds,
}

#[derive(Clone, Debug)]
struct Ids {
    embed: ParamId,
    out: ParamId,
    enc: Vec<EncLayerIds>,
    enc_norm: NormIds,
    dec: Vec<DecLayerIds>,
    dec_norm: NormIds,
    ret: Option<RetrieverIds>,
}

impl Ids {
    fn lookup<T: Scalar>(s: &ParamStore<T>, c: &ModelConfig, with_retriever: bool) -> Result<Self> {
        let ret = if with_retriever {
            Some(RetrieverIds {
                embed: s.id("ret.embed")?,
                layers: (0..c.n_ret_layers).map(|i| lookup_enc_layer(s, &format!("ret.layer{i}"))).collect::<Result<_>>()?,
                norm: lookup_norm(s, "ret.norm")?,
                cross: lookup_attn(s, "ret.cross")?,
            })
        } else {
            None
        };
        Ok(Ids {
            embed: s.id("gen.embed")?,
            out: s.id("gen.out")?,
            enc: (0..c.n_enc_layers).map(|i| lookup_enc_layer(s, &format!("gen.enc{i}"))).collect::<Result<_>>()?,
            enc_norm: lookup_norm(s, "gen.enc_norm")?,
            dec: (0..c.n_dec_layers).map(|i| lookup_dec_layer(s, &format!("gen.dec{i}"))).collect::<Result<_>>()?,
            dec_norm: lookup_norm(s, "gen.dec_norm")?,
            ret,
        })
    }
}

/// Encoder states of one input sequence.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub reps: Var,
    /// Key validity per row (`false` for padding).
    pub valid: Vec<bool>,
}

impl Encoded {
    fn n_valid(&self) -> usize {
        self.valid.iter().rposition(|&v| v).map_or(0, |i| i + 1)
    }
}

/// Per-sample state for incremental decoding: the dynamic matrices and the
/// per-layer cross-attention keys/values of the encoded input.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub base_vocab: usize,
    pub n_entities: usize,
    /// `[E_orig; r(Z); 0-padding]`.
    pub e_dyn: Tensor<T>,
    /// `[W_out; r(Z); 0-padding]`.
    pub w_dyn: Tensor<T>,
    /// Which dynamic ids can be produced (padded entity slots cannot).
    pub valid: Vec<bool>,
    cross: Vec<(Tensor<T>, Tensor<T>)>,
    enc_valid: Vec<bool>,
}

impl<T> Prepared<T> {
    pub fn dyn_size(&self) -> usize {
        self.valid.len()
    }
}

/// Decoder keys and values for the prefix decoded so far.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    pub layers: Vec<LayerCache<T>>,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    /// `None` for a plain generator (no entity tokens).
    pub retriever: Option<Variant>,
    pub params: ParamStore<T>,
    ids: Ids,
    pe: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model: matrices ~ N(0, init_scale()), layer-norm gains 1,
    /// offsets 0.
    pub fn new(config: ModelConfig, retriever: Option<Variant>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::derive(seed, &[10]);
        let (d, v) = (config.d_model, config.vocab_size);
        {
            let mut b = Builder { store: &mut store, rng: &mut r, d, d_ff: config.d_ff, std: config.init_scale() };
            b.matrix("gen.embed", v, d);
            b.matrix("gen.out", v, d);
            for i in 0..config.n_enc_layers {
                b.enc_layer(&format!("gen.enc{i}"));
            }
            b.norm("gen.enc_norm");
            for i in 0..config.n_dec_layers {
                b.dec_layer(&format!("gen.dec{i}"));
            }
            b.norm("gen.dec_norm");
            if retriever.is_some() {
                b.matrix("ret.embed", v, d);
                for i in 0..config.n_ret_layers {
                    b.enc_layer(&format!("ret.layer{i}"));
                }
                b.norm("ret.norm");
                b.attn("ret.cross");
            }
        }
        Self::from_params(config, retriever, store)
    }

    /// Wraps existing parameters (e.g. loaded from a checkpoint).
    pub fn from_params(config: ModelConfig, retriever: Option<Variant>, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let ids = Ids::lookup(&params, &config, retriever.is_some())?;
        for (id, rows) in [(ids.embed, config.vocab_size), (ids.out, config.vocab_size)] {
            if params.get(id).value.shape() != [rows, config.d_model] {
                return Err(Error::Shape(format!(
                    "{} has shape {:?}, expected [{rows}, {}]",
                    params.get(id).name,
                    params.get(id).value.shape(),
                    config.d_model
                )));
            }
        }
        let pe = positional_encoding(config.max_seq_len + config.max_entity_len + 1, config.d_model);
        Ok(Model { config, retriever, params, ids, pe })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            retriever: self.retriever,
            params: self.params.cast(),
            ids: self.ids.clone(),
            pe: self.pe.cast(),
        }
    }

    /// Base vocabulary size `V`.
    pub fn base_vocab(&self) -> usize {
        self.config.vocab_size
    }

    /// Parameters belonging to the retriever (names start with `ret.`).
    pub fn is_retriever_param(name: &str) -> bool {
        name.starts_with("ret.")
    }

    fn sqrt_d(&self) -> T {
        T::of((self.config.d_model as f64).sqrt())
    }

    /// `table[ids] * sqrt(d) + PE[positions]`.
    fn embed(&self, g: &mut Graph<'_, T>, table: Var, ids: &[usize], positions: &[usize], dropout: f64) -> Result<Var> {
        let x = g.gather(table, ids)?;
        let x = g.scale(x, self.sqrt_d());
        let d = self.config.d_model;
        let mut pe = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            if p >= self.pe.rows() {
                return Err(Error::Index(format!("position {p} beyond the position table")));
            }
            pe.extend_from_slice(self.pe.row(p));
        }
        let pe = g.constant(Tensor::matrix(positions.len(), d, pe)?);
        let x = g.add(x, pe)?;
        Ok(g.dropout(x, dropout))
    }

    fn check_ids(&self, ids: &[usize], limit: usize, what: &str) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= limit) {
            return Err(Error::Index(format!("{what} id {bad} outside [0, {limit})")));
        }
        Ok(())
    }

    /// Runs the generator encoder. Tokens equal to PAD are masked as keys.
    pub fn encode(&self, g: &mut Graph<'_, T>, src: &[usize]) -> Result<Encoded> {
        if src.is_empty() {
            return Err(Error::Data("empty input sequence".into()));
        }
        if src.len() > self.config.max_seq_len {
            return Err(Error::Data(format!("input of {} tokens exceeds max_seq_len", src.len())));
        }
        self.check_ids(src, self.base_vocab(), "input")?;
        let table = g.param(self.ids.embed);
        let pos: Vec<usize> = (0..src.len()).collect();
        let x = self.embed(g, table, src, &pos, self.config.dropout)?;
        let valid: Vec<bool> = src.iter().map(|&t| t != crate::data::vocab::PAD).collect();
        let spec = AttnSpec::dense(self.config.n_heads, src.len(), src.len()).with_key_valid(valid.clone());
        let reps = encoder_stack(g, x, &self.ids.enc, &self.ids.enc_norm, &spec, self.config.dropout)?;
        Ok(Encoded { reps, valid })
    }

    /// Entity embeddings `r(Z)`, one row per description, or `None` without
    /// entities or without a retriever.
    pub fn entity_embeddings(
        &self,
        g: &mut Graph<'_, T>,
        enc: &Encoded,
        src: &[usize],
        descs: &[Vec<usize>],
    ) -> Result<Option<Var>> {
        let (Some(variant), Some(ids)) = (self.retriever, self.ids.ret.as_ref()) else {
            return Ok(None);
        };
        if descs.is_empty() {
            return Ok(None);
        }
        let heads = self.config.n_heads;
        let n_valid = enc.n_valid();
        // Concatenate all retriever sequences; attention stays within each.
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut ranges: Vec<Range<usize>> = Vec::with_capacity(descs.len());
        for (j, z) in descs.iter().enumerate() {
            if z.is_empty() {
                return Err(Error::Data(format!("entity {j} has an empty description")));
            }
            if z.len() > self.config.max_entity_len {
                return Err(Error::Data(format!("entity {j} description exceeds max_entity_len")));
            }
            self.check_ids(z, self.base_vocab(), "description")?;
            let start = tokens.len();
            if variant == Variant::PrependInput {
                tokens.extend_from_slice(&src[..n_valid]);
                tokens.push(SEP);
            }
            tokens.extend_from_slice(z);
            positions.extend(0..tokens.len() - start);
            ranges.push(start..tokens.len());
        }
        let table = g.param(ids.embed);
        let x = self.embed(g, table, &tokens, &positions, self.config.retriever_dropout())?;
        let spec = AttnSpec::blocks(heads, &ranges);
        let h = encoder_stack(g, x, &ids.layers, &ids.norm, &spec, self.config.retriever_dropout())?;
        let r = match variant {
            Variant::NoCrossAttention | Variant::PrependInput => g.max_pool_segments(h, &ranges)?,
            Variant::CrossAttention => {
                let q_src = if n_valid < enc.valid.len() { g.slice_rows(enc.reps, 0..n_valid)? } else { enc.reps };
                let spec = AttnSpec::cross_blocks(heads, n_valid, &ranges);
                let a = multi_head(g, q_src, h, &ids.cross, spec)?;
                let segs: Vec<Range<usize>> = (0..descs.len()).map(|j| j * n_valid..(j + 1) * n_valid).collect();
                g.max_pool_segments(a, &segs)?
            }
        };
        Ok(Some(r))
    }

    /// `[base; r(Z); zeros]` with `pad_to - M` zero rows appended.
    fn extend(&self, g: &mut Graph<'_, T>, base: ParamId, rz: Option<Var>, m: usize, pad_to: usize) -> Result<Var> {
        let mut x = g.param(base);
        if let Some(rz) = rz {
            x = g.concat_rows(x, rz)?;
        }
        if pad_to > m {
            let z = g.constant(Tensor::zeros(&[pad_to - m, self.config.d_model]));
            x = g.concat_rows(x, z)?;
        }
        Ok(x)
    }

    /// Dynamic-vocabulary validity: `V + M` real ids followed by padded slots.
    pub fn dyn_valid(&self, m: usize, pad_to: usize) -> Vec<bool> {
        let v = self.base_vocab();
        (0..v + pad_to.max(m)).map(|i| i < v + m).collect()
    }

    /// Decoder pass over `dec_in` (dynamic ids) with `E_dyn` as input table;
    /// returns the final hidden states `G` (one row per position).
    pub fn decode_hidden(&self, g: &mut Graph<'_, T>, enc: &Encoded, e_dyn: Var, dec_in: &[usize]) -> Result<Var> {
        if dec_in.len() > self.config.max_seq_len {
            return Err(Error::Data(format!("decoder sequence of {} exceeds max_seq_len", dec_in.len())));
        }
        self.check_ids(dec_in, g.value(e_dyn).rows(), "decoder input")?;
        let pos: Vec<usize> = (0..dec_in.len()).collect();
        let mut x = self.embed(g, e_dyn, dec_in, &pos, self.config.dropout)?;
        for l in &self.ids.dec {
            let ck = project(g, enc.reps, l.cross.wk)?;
            let cv = project(g, enc.reps, l.cross.wv)?;
            let (y, _, _) =
                decoder_layer(g, l, x, None, ck, cv, &enc.valid, self.config.n_heads, self.config.dropout)?;
            x = y;
        }
        norm(g, x, &self.ids.dec_norm)
    }

    /// Sum of token NLLs under teacher forcing, and the token count. Entity
    /// slots are padded to `pad_to` (masked out of every softmax).
    pub fn nll_sum(&self, g: &mut Graph<'_, T>, ex: &Example, pad_to: usize) -> Result<(Var, usize)> {
        let m = ex.descs.len();
        let enc = self.encode(g, &ex.src)?;
        let rz = self.entity_embeddings(g, &enc, &ex.src, &ex.descs)?;
        let m_eff = if rz.is_some() { m } else { 0 };
        let pad = pad_to.max(m_eff);
        self.check_ids(&ex.tgt, self.base_vocab() + m_eff, "target")
            .map_err(|e| Error::Data(e.to_string()))?;
        let e_dyn = self.extend(g, self.ids.embed, rz, m_eff, pad)?;
        let w_dyn = self.extend(g, self.ids.out, rz, m_eff, pad)?;
        let dec_in = ex.decoder_input();
        let h = self.decode_hidden(g, &enc, e_dyn, &dec_in)?;
        let logits = g.matmul_nt(h, w_dyn)?;
        let lp = g.log_softmax(logits, Some(self.dyn_valid(m_eff, pad)))?;
        let picked = g.pick(lp, &ex.tgt)?;
        let s = g.sum(picked);
        Ok((g.scale(s, -T::one()), ex.tgt.len()))
    }

    /// Mean NLL over target positions (evaluation mode, no dropout).
    pub fn sequence_nll(&self, ex: &Example) -> Result<f64> {
        let mut g = Graph::inference(&self.params);
        let (loss, n) = self.nll_sum(&mut g, ex, 0)?;
        Ok(g.value(loss).item().as_f64() / n as f64)
    }

    /// Encodes the input and entities once for incremental decoding.
    pub fn prepare(&self, src: &[usize], descs: &[Vec<usize>], pad_to: usize) -> Result<Prepared<T>> {
        let mut g = Graph::inference(&self.params);
        let enc = self.encode(&mut g, src)?;
        let rz = self.entity_embeddings(&mut g, &enc, src, descs)?;
        let m = if rz.is_some() { descs.len() } else { 0 };
        let pad = pad_to.max(m);
        let e_dyn = self.extend(&mut g, self.ids.embed, rz, m, pad)?;
        let w_dyn = self.extend(&mut g, self.ids.out, rz, m, pad)?;
        let mut cross = Vec::with_capacity(self.ids.dec.len());
        for l in &self.ids.dec {
            let ck = project(&mut g, enc.reps, l.cross.wk)?;
            let cv = project(&mut g, enc.reps, l.cross.wv)?;
            cross.push((g.value(ck).clone(), g.value(cv).clone()));
        }
        Ok(Prepared {
            base_vocab: self.base_vocab(),
            n_entities: m,
            e_dyn: g.value(e_dyn).clone(),
            w_dyn: g.value(w_dyn).clone(),
            valid: self.dyn_valid(m, pad),
            cross,
            enc_valid: enc.valid,
        })
    }

    pub fn empty_cache(&self) -> KvCache<T> {
        let d = self.config.d_model;
        let layers = (0..self.ids.dec.len())
            .map(|_| LayerCache { k: Tensor::zeros(&[0, d]), v: Tensor::zeros(&[0, d]) })
            .collect();
        KvCache { layers, len: 0 }
    }

    /// Feeds `token` at the next position and returns the log-probabilities of
    /// the following token over the dynamic vocabulary (`-inf` for padding).
    pub fn step(&self, prep: &Prepared<T>, cache: &mut KvCache<T>, token: usize) -> Result<Vec<f64>> {
        if token >= prep.dyn_size() || !prep.valid[token] {
            return Err(Error::Index(format!("token {token} outside the dynamic vocabulary")));
        }
        if cache.len >= self.config.max_seq_len {
            return Err(Error::Data("decoded sequence reached max_seq_len".into()));
        }
        let mut g = Graph::inference(&self.params);
        let e = g.constant(prep.e_dyn.clone());
        let mut x = self.embed_at(&mut g, e, token, cache.len)?;
        for (i, l) in self.ids.dec.iter().enumerate() {
            let ck = g.constant(prep.cross[i].0.clone());
            let cv = g.constant(prep.cross[i].1.clone());
            let (y, k, v) = decoder_layer(
                &mut g,
                l,
                x,
                Some(&cache.layers[i]),
                ck,
                cv,
                &prep.enc_valid,
                self.config.n_heads,
                0.0,
            )?;
            cache.layers[i] = LayerCache { k: g.value(k).clone(), v: g.value(v).clone() };
            x = y;
        }
        cache.len += 1;
        let h = norm(&mut g, x, &self.ids.dec_norm)?;
        let w = g.constant(prep.w_dyn.clone());
        let logits = g.matmul_nt(h, w)?;
        let lp = g.log_softmax(logits, Some(prep.valid.clone()))?;
        Ok(g.value(lp).data().iter().map(|x| x.as_f64()).collect())
    }

    fn embed_at(&self, g: &mut Graph<'_, T>, table: Var, token: usize, pos: usize) -> Result<Var> {
        self.embed(g, table, &[token], &[pos], 0.0)
    }

    /// Log-probabilities after each prefix position, recomputed from scratch
    /// without a cache (reference for [`Model::step`]).
    pub fn full_logprobs(&self, prep: &Prepared<T>, enc_src: &[usize], prefix: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference(&self.params);
        let enc = self.encode(&mut g, enc_src)?;
        let e = g.constant(prep.e_dyn.clone());
        let h = self.decode_hidden(&mut g, &enc, e, prefix)?;
        let w = g.constant(prep.w_dyn.clone());
        let logits = g.matmul_nt(h, w)?;
        let lp = g.log_softmax(logits, Some(prep.valid.clone()))?;
        let n = prep.dyn_size();
        Ok(g.value(lp).data().chunks(n).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect())
    }
}
