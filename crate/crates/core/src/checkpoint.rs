//! On-disk checkpoints: a UTF-8 `manifest.txt` of `key = value` lines and a
//! `params.bin` blob of little-endian `f32` values.
//!
//! The manifest holds the format version, the model configuration, the
//! retriever variant, the vocabulary (id-ordered, with its hash), optional
//! run metadata, and one record per parameter in registration order:
//!
//! ```text
//! param.3 = gen.enc0.attn.wq 64x64 53760 16384
//! ```
//!
//! i.e. name, shape, byte offset and byte length within `params.bin`.

use std::fs;
use std::path::Path;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::kv;
use crate::model::{Model, ModelConfig, Variant};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT: &str = "dynvocab-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "params.bin";

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Vocabulary,
    /// Free-form metadata stored with the weights (the run configuration as JSON).
    pub meta: Option<String>,
}

#[derive(Debug)]
struct Record {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn parse_record(value: &str) -> Result<Record> {
    let bad = || Error::Checkpoint(format!("malformed parameter record {value:?}"));
    let parts: Vec<&str> = value.split_whitespace().collect();
    let [name, shape, offset, len] = parts[..] else { return Err(bad()) };
    let shape = shape.split('x').map(|d| d.parse().map_err(|_| bad())).collect::<Result<Vec<usize>>>()?;
    Ok(Record {
        name: name.to_string(),
        shape,
        offset: offset.parse().map_err(|_| bad())?,
        len: len.parse().map_err(|_| bad())?,
    })
}

/// Writes `model` and `vocab` to `dir` (created if missing).
pub fn save(dir: &Path, model: &Model<f32>, vocab: &Vocabulary, meta: Option<&str>) -> Result<()> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    fs::create_dir_all(dir)?;
    let mut m = format!("format = {FORMAT}\nversion = {VERSION}\n");
    m.push_str(&model.config.to_kv());
    m.push_str(&format!("retriever = {}\n", model.retriever.map_or("none".to_string(), |v| v.to_string())));
    if let Some(meta) = meta {
        if meta.contains('\n') {
            return Err(Error::Checkpoint("metadata must be a single line".into()));
        }
        m.push_str(&format!("meta = {meta}\n"));
    }
    m.push_str(&format!("vocab_hash = {}\n", vocab.hash()));
    for (i, t) in vocab.tokens().iter().enumerate() {
        m.push_str(&format!("vocab.{i} = {t}\n"));
    }
    let mut blob = Vec::with_capacity(model.params.num_scalars() * 4);
    for (id, p) in model.params.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let offset = blob.len();
        for x in p.value.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        m.push_str(&format!("param.{} = {} {} {offset} {}\n", id.0, p.name, shape.join("x"), blob.len() - offset));
    }
    fs::write(dir.join(MANIFEST), m)?;
    fs::write(dir.join(BLOB), blob)?;
    Ok(())
}

/// Reads a checkpoint written by [`save`], verifying the version, the
/// vocabulary hash, and that every parameter matches the architecture.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let blob = fs::read(dir.join(BLOB))?;
    let mut config = ModelConfig::desk(0);
    let (mut format, mut version, mut retriever, mut meta, mut hash) = (None, None, None, None, None);
    let mut tokens: Vec<(usize, String)> = Vec::new();
    let mut records: Vec<(usize, Record)> = Vec::new();
    for (k, v) in kv::parse(&text)? {
        if let Some(i) = k.strip_prefix("vocab.") {
            tokens.push((kv::parse_value(&k, i)?, v));
        } else if let Some(i) = k.strip_prefix("param.") {
            records.push((kv::parse_value(&k, i)?, parse_record(&v)?));
        } else {
            match k.as_str() {
                "format" => format = Some(v),
                "version" => version = Some(kv::parse_value::<u32>(&k, &v)?),
                "retriever" => retriever = Some(v),
                "meta" => meta = Some(v),
                "vocab_hash" => hash = Some(v),
                _ => {
                    if !config.set(&k, &v)? {
                        return Err(Error::Checkpoint(format!("unknown manifest key {k:?}")));
                    }
                }
            }
        }
    }
    if format.as_deref() != Some(FORMAT) {
        return Err(Error::Checkpoint(format!("not a checkpoint manifest (format {format:?})")));
    }
    if version != Some(VERSION) {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version:?} (expected {VERSION})")));
    }
    tokens.sort_by_key(|(i, _)| *i);
    if tokens.iter().enumerate().any(|(i, (j, _))| i != *j) {
        return Err(Error::Checkpoint("vocabulary entries are not contiguous".into()));
    }
    let vocab = Vocabulary::from_tokens(tokens.into_iter().map(|(_, t)| t).collect())?;
    if hash.as_deref() != Some(vocab.hash().as_str()) {
        return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
    }
    if vocab.len() != config.vocab_size {
        return Err(Error::Checkpoint("vocabulary size disagrees with the model configuration".into()));
    }
    let retriever = match retriever.as_deref() {
        None => return Err(Error::Checkpoint("missing retriever entry".into())),
        Some("none") => None,
        Some(v) => Some(v.parse::<Variant>()?),
    };

    // The architecture determines the expected parameter list.
    let template = Model::<f32>::new(config.clone(), retriever, 0)?;
    records.sort_by_key(|(i, _)| *i);
    if records.len() != template.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameter records, architecture has {}",
            records.len(),
            template.params.len()
        )));
    }
    let mut store = ParamStore::new();
    for (i, (idx, r)) in records.iter().enumerate() {
        let expect = template.params.get(ParamId(i));
        if *idx != i || r.name != expect.name || r.shape != expect.value.shape() {
            return Err(Error::Checkpoint(format!(
                "record {idx} ({} {:?}) does not match parameter {} {:?}",
                r.name,
                r.shape,
                expect.name,
                expect.value.shape()
            )));
        }
        let numel: usize = r.shape.iter().product();
        if r.len != numel * 4 || r.offset.checked_add(r.len).is_none_or(|end| end > blob.len()) {
            return Err(Error::Checkpoint(format!("parameter {} lies outside the blob", r.name)));
        }
        let data = blob[r.offset..r.offset + r.len]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.add(&r.name, Tensor::new(r.shape.clone(), data)?);
    }
    let used: usize = records.iter().map(|(_, r)| r.len).sum();
    if used != blob.len() {
        return Err(Error::Checkpoint(format!("blob has {} bytes, records cover {used}", blob.len())));
    }
    let model = Model::from_params(config, retriever, store)?;
    Ok(Checkpoint { model, vocab, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Model<f32>, Vocabulary) {
        let vocab = Vocabulary::build(["a b c = # d"]);
        let mut c = ModelConfig::desk(vocab.len());
        c.d_model = 8;
        c.n_heads = 2;
        c.d_ff = 16;
        (Model::new(c, Some(Variant::PrependInput), 4).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, vocab) = tiny();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &m, &vocab, Some("{\"seed\":4}")).unwrap();
        let ck = load(dir.path()).unwrap();
        assert_eq!(ck.vocab, vocab);
        assert_eq!(ck.meta.as_deref(), Some("{\"seed\":4}"));
        assert_eq!(ck.model.retriever, Some(Variant::PrependInput));
        for ((_, a), (_, b)) in m.params.iter().zip(ck.model.params.iter()) {
            assert_eq!(a.name, b.name);
            let (x, y): (Vec<u32>, Vec<u32>) =
                (a.value.data().iter().map(|v| v.to_bits()).collect(), b.value.data().iter().map(|v| v.to_bits()).collect());
            assert_eq!(x, y);
        }
    }

    #[test]
    fn tampering_is_detected() {
        let (m, vocab) = tiny();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &m, &vocab, None).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();

        fs::write(dir.path().join(MANIFEST), manifest.replace("version = 1", "version = 9")).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));

        fs::write(dir.path().join(MANIFEST), manifest.replace("vocab.5 = ", "vocab.5 = z")).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));

        fs::write(dir.path().join(MANIFEST), &manifest).unwrap();
        let mut blob = fs::read(dir.path().join(BLOB)).unwrap();
        blob.pop();
        fs::write(dir.path().join(BLOB), blob).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));
    }
}
