use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Funcall,
    Colselect,
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "funcall" => Ok(TaskKind::Funcall),
            "colselect" => Ok(TaskKind::Colselect),
            _ => Err(Error::Config(format!("unknown task {s:?} (expected funcall or colselect)"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Funcall => "funcall",
            TaskKind::Colselect => "colselect",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NameSimilarity {
    Low,
    High,
}

impl FromStr for NameSimilarity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(NameSimilarity::Low),
            "high" => Ok(NameSimilarity::High),
            _ => Err(Error::Config(format!("unknown name_similarity {s:?}"))),
        }
    }
}

impl fmt::Display for NameSimilarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NameSimilarity::Low => "low",
            NameSimilarity::High => "high",
        })
    }
}

/// Synthetic dataset parameters. Generation is a pure function of this value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: TaskKind,
    pub n_samples: usize,
    pub entity_min: usize,
    pub entity_max: usize,
    pub desc_min: usize,
    pub desc_max: usize,
    pub name_similarity: NameSimilarity,
    pub seed: u64,
}

impl TaskConfig {
    pub fn funcall(n_samples: usize, entities: usize, seed: u64) -> Self {
        TaskConfig {
            task: TaskKind::Funcall,
            n_samples,
            entity_min: entities,
            entity_max: entities,
            desc_min: 5,
            desc_max: 40,
            name_similarity: NameSimilarity::High,
            seed,
        }
    }

    pub fn colselect(n_samples: usize, seed: u64) -> Self {
        TaskConfig {
            task: TaskKind::Colselect,
            n_samples,
            entity_min: 6,
            entity_max: 12,
            desc_min: 5,
            desc_max: 20,
            name_similarity: NameSimilarity::High,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if self.entity_min == 0 || self.entity_min > self.entity_max {
            return Err(Error::Config(format!("empty entity range [{}, {}]", self.entity_min, self.entity_max)));
        }
        if self.desc_min == 0 || self.desc_min > self.desc_max {
            return Err(Error::Config(format!("empty description range [{}, {}]", self.desc_min, self.desc_max)));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => self.task = value.parse()?,
            "n_samples" => self.n_samples = kv::parse_value(key, value)?,
            "entity_min" => self.entity_min = kv::parse_value(key, value)?,
            "entity_max" => self.entity_max = kv::parse_value(key, value)?,
            "desc_min" => self.desc_min = kv::parse_value(key, value)?,
            "desc_max" => self.desc_max = kv::parse_value(key, value)?,
            "name_similarity" => self.name_similarity = value.parse()?,
            "seed" => self.seed = kv::parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown task key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults for `task`, then every `key = value` line of `text` applied in order.
    pub fn from_kv(text: &str) -> Result<Self> {
        let pairs = kv::parse(text)?;
        let task = pairs.iter().find(|(k, _)| k == "task").map(|(_, v)| v.parse()).transpose()?;
        let mut cfg = match task.unwrap_or(TaskKind::Funcall) {
            TaskKind::Funcall => TaskConfig::funcall(3334, 16, 0),
            TaskKind::Colselect => TaskConfig::colselect(2000, 0),
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "task = {}\nn_samples = {}\nentity_min = {}\nentity_max = {}\ndesc_min = {}\ndesc_max = {}\nname_similarity = {}\nseed = {}\n",
            self.task,
            self.n_samples,
            self.entity_min,
            self.entity_max,
            self.desc_min,
            self.desc_max,
            self.name_similarity,
            self.seed
        )
    }
}
