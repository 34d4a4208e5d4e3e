//! Project-level function-call generation.
//!
//! Each project owns a set of helper functions (the entities). A sample's
//! input is a docstring asking for one to three behaviors, phrased with verbs
//! that never occur in the function bodies; each entity's description is a
//! pseudo-body whose first statement is unique to the behavior it implements.
//! Names carry no information about the behavior. In high-similarity mode the
//! functions come in families that share an object and have names within
//! edit distance one of each other.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::sample::{marker, Entity, Sample};
use super::task::{NameSimilarity, TaskConfig, TaskKind};
use crate::error::{Error, Result};
use crate::rng;

struct Verb {
    doc: [&'static str; 2],
    /// `body[0]` is unique to the verb.
    body: [&'static str; 3],
}

const VERBS: [Verb; 12] = [
    Verb { doc: ["reads", "retrieves"], body: ["read bytes", "open handle", "close handle"] },
    Verb { doc: ["stores", "persists"], body: ["write bytes", "open handle", "flush buffer"] },
    Verb { doc: ["decodes", "interprets"], body: ["split fields", "map tokens", "build tree"] },
    Verb { doc: ["checks", "verifies"], body: ["assert shape", "raise error", "compare bounds"] },
    Verb { doc: ["transmits", "posts"], body: ["push packet", "connect socket", "await ack"] },
    Verb { doc: ["removes", "erases"], body: ["unlink entry", "find entry", "drop index"] },
    Verb { doc: ["modifies", "patches"], body: ["assign field", "find entry", "bump version"] },
    Verb { doc: ["calculates", "derives"], body: ["add value", "loop items", "sum total"] },
    Verb { doc: ["draws", "displays"], body: ["paint pixels", "create canvas", "blit frame"] },
    Verb { doc: ["downloads", "pulls"], body: ["get response", "open request", "decode body"] },
    Verb { doc: ["combines", "joins"], body: ["union keys", "zip pairs", "resolve conflict"] },
    Verb { doc: ["arranges", "ranks"], body: ["swap items", "compare keys", "shift slice"] },
];

const OBJECTS: [&str; 12] =
    ["user", "order", "config", "token", "invoice", "report", "session", "message", "image", "cart", "profile", "record"];

const PREFIXES: [&str; 8] = ["get", "set", "do", "run", "make", "handle", "process", "apply"];
const SUFFIXES: [&str; 12] = ["item", "items", "list", "lists", "data", "info", "one", "ones", "all", "raw", "row", "impl"];
const SWAPS: [(&str, &str); 5] = [("get", "set"), ("raw", "row"), ("do", "to"), ("run", "ran"), ("data", "date")];

const FILLERS: [&str; 8] =
    ["log debug", "check null", "retry once", "cache result", "emit metric", "trace call", "lock mutex", "release lock"];
const INTROS: [&str; 4] = ["function that", "helper which", "routine that", "method that"];
const LINKS: [&str; 3] = [", then", "and then", ", after that"];
const TAILS: [&str; 5] = ["", "safely", "quickly", "for the caller", "in place"];
const VARS: [&str; 3] = ["a", "b", "c"];

pub const MAX_CALLS: usize = 3;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct Behavior {
    verb: usize,
    object: usize,
}

/// One-edit variants of a name part.
fn near_words(w: &str) -> Vec<String> {
    let mut out = Vec::new();
    match w.strip_suffix('s') {
        Some(stem) if !stem.is_empty() => out.push(stem.to_string()),
        _ => out.push(format!("{w}s")),
    }
    for (a, b) in SWAPS {
        if w == a {
            out.push(b.to_string());
        } else if w == b {
            out.push(a.to_string());
        }
    }
    out
}

fn random_name(rng: &mut rng::Rng, object: usize) -> String {
    format!("{}_{}_{}", PREFIXES.choose(rng).unwrap(), OBJECTS[object], SUFFIXES.choose(rng).unwrap())
}

/// A fresh name one edit away from `base`, changing the prefix or the suffix.
fn near_name(rng: &mut rng::Rng, base: &str, taken: &HashSet<String>) -> Option<String> {
    let parts: Vec<&str> = base.split('_').collect();
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    let middle = parts[1..parts.len() - 1].join("_");
    let mut cands: Vec<String> = near_words(last).into_iter().map(|s| format!("{first}_{middle}_{s}")).collect();
    cands.extend(near_words(first).into_iter().map(|p| format!("{p}_{middle}_{last}")));
    cands.retain(|c| !taken.contains(c));
    cands.choose(rng).cloned()
}

fn description(rng: &mut rng::Rng, b: Behavior, cfg: &TaskConfig) -> String {
    let verb = &VERBS[b.verb];
    let obj = OBJECTS[b.object];
    let span = (cfg.desc_max - cfg.desc_min + 1) as f64;
    let u: f64 = rng.random();
    let target = cfg.desc_min + (u * u * span) as usize;
    let mut pieces: Vec<String> = vec![format!("takes {obj} ; {}", verb.body[0])];
    let mut len = 5;
    let mut extra: Vec<String> = vec![verb.body[1].to_string(), verb.body[2].to_string(), format!("returns {obj}")];
    let mut fillers: Vec<&str> = FILLERS.to_vec();
    fillers.shuffle(rng);
    extra.extend(fillers.iter().map(|f| f.to_string()));
    // Characteristic statements first, then fillers; each costs 3 tokens.
    for e in extra {
        let cost = e.split_whitespace().count() + 1;
        if len + cost > target {
            break;
        }
        len += cost;
        let at = rng.random_range(1..=pieces.len());
        pieces.insert(at, e);
    }
    pieces.join(" ; ")
}

fn project_entities(rng: &mut rng::Rng, m: usize, cfg: &TaskConfig) -> Vec<(Behavior, Entity)> {
    let mut used: HashSet<Behavior> = HashSet::new();
    let mut names: HashSet<String> = HashSet::new();
    let mut out: Vec<(Behavior, Entity)> = Vec::new();
    while out.len() < m {
        let object = rng.random_range(0..OBJECTS.len());
        let free: Vec<usize> = (0..VERBS.len()).filter(|&v| !used.contains(&Behavior { verb: v, object })).collect();
        if free.is_empty() {
            continue;
        }
        let family = match cfg.name_similarity {
            NameSimilarity::High => rng.random_range(2..=3usize),
            NameSimilarity::Low => 1,
        }
        .min(m - out.len())
        .min(free.len());
        let verbs: Vec<usize> = free.choose_multiple(rng, family).copied().collect();
        let mut base = random_name(rng, object);
        while names.contains(&base) {
            base = random_name(rng, object);
        }
        for (i, &verb) in verbs.iter().enumerate() {
            let b = Behavior { verb, object };
            let name = if i == 0 {
                base.clone()
            } else {
                match near_name(rng, &base, &names) {
                    Some(n) => n,
                    None => break,
                }
            };
            used.insert(b);
            names.insert(name.clone());
            out.push((b, Entity { name, description: description(rng, b, cfg) }));
        }
    }
    out.shuffle(rng);
    out
}

fn sample_calls(rng: &mut rng::Rng, m: usize) -> usize {
    let u: f64 = rng.random();
    let k = if u < 0.75 {
        1
    } else if u < 0.95 {
        2
    } else {
        3
    };
    k.min(m)
}

/// Generates `cfg.n_samples` function-call samples.
pub fn gen_funcall(cfg: &TaskConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if cfg.task != TaskKind::Funcall {
        return Err(Error::Config("gen_funcall needs task = funcall".into()));
    }
    if cfg.entity_min < MAX_CALLS {
        return Err(Error::Config(format!(
            "infeasible: samples use up to {MAX_CALLS} behaviors but entity_min is {}",
            cfg.entity_min
        )));
    }
    if cfg.entity_max > VERBS.len() * OBJECTS.len() {
        return Err(Error::Config(format!("infeasible: at most {} distinct behaviors", VERBS.len() * OBJECTS.len())));
    }
    if cfg.desc_max < 5 {
        return Err(Error::Config("infeasible: descriptions need at least 5 tokens".into()));
    }
    let mut rng = rng::derive(cfg.seed, &[1]);
    let mut out = Vec::with_capacity(cfg.n_samples);
    let mut group = 0usize;
    while out.len() < cfg.n_samples {
        let m = rng.random_range(cfg.entity_min..=cfg.entity_max);
        let ents = project_entities(&mut rng, m, cfg);
        let group_size = *[1usize, 1, 2, 3].choose(&mut rng).unwrap();
        for k in 0..group_size.min(cfg.n_samples - out.len()) {
            let calls = sample_calls(&mut rng, m);
            let gold: Vec<usize> = rand::seq::index::sample(&mut rng, m, calls).into_vec();
            let mut clauses = Vec::new();
            for &j in &gold {
                let b = ents[j].0;
                clauses.push(format!("{} the {}", VERBS[b.verb].doc.choose(&mut rng).unwrap(), OBJECTS[b.object]));
            }
            let mut input = format!("{} {}", INTROS.choose(&mut rng).unwrap(), clauses[0]);
            for c in &clauses[1..] {
                input.push_str(&format!(" {} {c}", LINKS.choose(&mut rng).unwrap()));
            }
            let tail = TAILS.choose(&mut rng).unwrap();
            if !tail.is_empty() {
                input.push(' ');
                input.push_str(tail);
            }
            let mut target = String::from("def main ( ctx ) :");
            let mut prev = "ctx";
            for (i, &j) in gold.iter().enumerate() {
                target.push_str(&format!(" {} = {} ( {prev} ) ;", VARS[i], marker(j)));
                prev = VARS[i];
            }
            target.push_str(&format!(" return {prev}"));
            out.push(Sample {
                id: format!("fc-{group:06}-{k}"),
                input: super::vocab::normalize(&input),
                target,
                entities: ents.iter().map(|(_, e)| e.clone()).collect(),
            });
        }
        group += 1;
    }
    Ok(out)
}
