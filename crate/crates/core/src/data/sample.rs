//! Samples, entity markers, and the JSONL dataset format.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::split_tokens;
use crate::error::{Error, Result};

const MARK_OPEN: &str = "⟨E:";
const MARK_CLOSE: char = '⟩';

/// Inline reference to entity `j` inside a stored target string.
pub fn marker(j: usize) -> String {
    format!("{MARK_OPEN}{j}{MARK_CLOSE}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entity {
    pub name: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub input: String,
    /// Output text with `⟨E:j⟩` markers for entity references.
    pub target: String,
    pub entities: Vec<Entity>,
}

/// A target token: either a base-vocabulary word or an entity reference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TargetToken {
    Word(String),
    Entity(usize),
}

/// Splits a marked-up target into tokens.
pub fn parse_target(target: &str) -> Result<Vec<TargetToken>> {
    let mut out = Vec::new();
    let mut rest = target;
    while let Some(pos) = rest.find(MARK_OPEN) {
        out.extend(split_tokens(&rest[..pos]).into_iter().map(|t| TargetToken::Word(t.to_string())));
        let after = &rest[pos + MARK_OPEN.len()..];
        let close = after.find(MARK_CLOSE).ok_or_else(|| Error::Data(format!("unterminated marker in {target:?}")))?;
        let j: usize =
            after[..close].parse().map_err(|_| Error::Data(format!("bad marker index {:?}", &after[..close])))?;
        out.push(TargetToken::Entity(j));
        rest = &after[close + MARK_CLOSE.len_utf8()..];
    }
    out.extend(split_tokens(rest).into_iter().map(|t| TargetToken::Word(t.to_string())));
    Ok(out)
}

impl Sample {
    /// Group (project or schema) the sample belongs to: the id up to its last `-`.
    pub fn group(&self) -> &str {
        self.id.rsplit_once('-').map_or(self.id.as_str(), |(g, _)| g)
    }

    pub fn target_tokens(&self) -> Result<Vec<TargetToken>> {
        parse_target(&self.target)
    }

    /// Indices of the entities referenced in the target.
    pub fn gold(&self) -> BTreeSet<usize> {
        self.target_tokens()
            .map(|ts| {
                ts.into_iter()
                    .filter_map(|t| match t {
                        TargetToken::Entity(j) => Some(j),
                        TargetToken::Word(_) => None,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Target surface string: markers replaced by entity names, tokens single-spaced.
    pub fn target_surface(&self) -> Result<String> {
        let parts: Vec<String> = self
            .target_tokens()?
            .into_iter()
            .map(|t| match t {
                TargetToken::Word(w) => Ok(w),
                TargetToken::Entity(j) => self
                    .entities
                    .get(j)
                    .map(|e| e.name.clone())
                    .ok_or_else(|| Error::Data(format!("sample {}: marker {j} has no entity", self.id))),
            })
            .collect::<Result<_>>()?;
        Ok(parts.join(" "))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.entities.len();
        for t in self.target_tokens().map_err(|e| Error::Data(format!("sample {}: {e}", self.id)))? {
            if let TargetToken::Entity(j) = t {
                if j >= n {
                    return Err(Error::Data(format!(
                        "sample {}: marker index {j} but only {n} entities",
                        self.id
                    )));
                }
            }
        }
        let mut names = HashSet::new();
        for e in &self.entities {
            if e.name.trim().is_empty() {
                return Err(Error::Data(format!("sample {}: empty entity name", self.id)));
            }
            if split_tokens(&e.description).is_empty() {
                return Err(Error::Data(format!("sample {}: entity {} has an empty description", self.id, e.name)));
            }
            if !names.insert(e.name.as_str()) {
                return Err(Error::Data(format!("sample {}: duplicate entity name {}", self.id, e.name)));
            }
        }
        Ok(())
    }
}

pub fn save_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_jsonl_string(samples: &[Sample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        s.validate().map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(s);
    }
    Ok(out)
}
