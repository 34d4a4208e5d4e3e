use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv;

/// How entity embeddings are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Description encoder, cross-attention with generator encoder states as
    /// queries, max-pool over generator positions.
    #[default]
    CrossAttention,
    /// Max-pool of the description encoding alone.
    NoCrossAttention,
    /// Encode `input <sep> description` jointly and max-pool.
    PrependInput,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_attention" => Ok(Variant::CrossAttention),
            "no_cross_attention" => Ok(Variant::NoCrossAttention),
            "prepend_input" => Ok(Variant::PrependInput),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected cross_attention, no_cross_attention or prepend_input)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::CrossAttention => "cross_attention",
            Variant::NoCrossAttention => "no_cross_attention",
            Variant::PrependInput => "prepend_input",
        })
    }
}

/// Architecture hyperparameters shared by the generator and the retriever.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Base vocabulary size `V`.
    pub vocab_size: usize,
    /// Dropout in the generator.
    pub dropout: f64,
    /// Dropout inside the retriever; `None` uses `dropout`.
    #[serde(default)]
    pub ret_dropout: Option<f64>,
    pub n_ret_layers: usize,
    pub max_entity_len: usize,
    /// Standard deviation of the normal initialization of every matrix;
    /// `None` uses `1/sqrt(d_model)`.
    #[serde(default)]
    pub init_std: Option<f64>,
}

impl ModelConfig {
    /// CPU-sized defaults: d=64, 4 heads, 2+2 layers, d_ff=256.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            max_seq_len: 256,
            vocab_size,
            dropout: 0.1,
            ret_dropout: None,
            n_ret_layers: 2,
            max_entity_len: 64,
            init_std: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!("vocab_size {} is below the 4 special tokens", self.vocab_size)));
        }
        for (name, p) in [("dropout", self.dropout), ("ret_dropout", self.retriever_dropout())] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        if let Some(s) = self.init_std {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("init_std {s} must be positive")));
            }
        }
        if self.d_ff == 0 || self.max_seq_len == 0 || self.max_entity_len == 0 {
            return Err(Error::Config("d_ff, max_seq_len and max_entity_len must be positive".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d_model" => self.d_model = kv::parse_value(key, value)?,
            "n_heads" => self.n_heads = kv::parse_value(key, value)?,
            "n_enc_layers" => self.n_enc_layers = kv::parse_value(key, value)?,
            "n_dec_layers" => self.n_dec_layers = kv::parse_value(key, value)?,
            "d_ff" => self.d_ff = kv::parse_value(key, value)?,
            "max_seq_len" => self.max_seq_len = kv::parse_value(key, value)?,
            "vocab_size" => self.vocab_size = kv::parse_value(key, value)?,
            "dropout" => self.dropout = kv::parse_value(key, value)?,
            "ret_dropout" => {
                self.ret_dropout = if value.trim() == "same" { None } else { Some(kv::parse_value(key, value)?) }
            }
            "n_ret_layers" => self.n_ret_layers = kv::parse_value(key, value)?,
            "max_entity_len" => self.max_entity_len = kv::parse_value(key, value)?,
            "init_std" => {
                self.init_std = if value.trim() == "auto" { None } else { Some(kv::parse_value(key, value)?) }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "d_model = {}\nn_heads = {}\nn_enc_layers = {}\nn_dec_layers = {}\nd_ff = {}\nmax_seq_len = {}\nvocab_size = {}\ndropout = {}\nret_dropout = {}\nn_ret_layers = {}\nmax_entity_len = {}\ninit_std = {}\n",
            self.d_model,
            self.n_heads,
            self.n_enc_layers,
            self.n_dec_layers,
            self.d_ff,
            self.max_seq_len,
            self.vocab_size,
            self.dropout,
            self.ret_dropout.map_or("same".to_string(), |p| p.to_string()),
            self.n_ret_layers,
            self.max_entity_len,
            self.init_std.map_or("auto".to_string(), |s| s.to_string())
        )
    }

    pub fn retriever_dropout(&self) -> f64 {
        self.ret_dropout.unwrap_or(self.dropout)
    }

    /// Standard deviation actually used for initialization.
    pub fn init_scale(&self) -> f64 {
        self.init_std.unwrap_or(1.0 / (self.d_model as f64).sqrt())
    }
}
