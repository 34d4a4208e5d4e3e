//! Column selection over synthetic schemas.
//!
//! A schema is a set of columns, each an (owner, concept) pair with a name like
//! `users_city` and a description listing some of the values stored in it.
//! Questions refer to columns by paraphrase ("the town of each users") and to
//! filter columns only through one of their values, so the description is the
//! sole place where a value can be tied to a column. Several columns share a
//! concept and high-similarity schemas use near-identical owners.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::sample::{marker, Entity, Sample};
use super::task::{NameSimilarity, TaskConfig, TaskKind};
use crate::error::{Error, Result};
use crate::rng;

struct Concept {
    stem: &'static str,
    desc: &'static str,
    para: [&'static str; 2],
    values: [&'static str; 12],
}

const CONCEPTS: [Concept; 16] = [
    Concept {
        stem: "city",
        desc: "city name",
        para: ["city", "town"],
        values: ["paris", "london", "tokyo", "berlin", "madrid", "rome", "oslo", "lima", "cairo", "delhi", "seoul", "dublin"],
    },
    Concept {
        stem: "country",
        desc: "country name",
        para: ["country", "nation"],
        values: ["france", "japan", "brazil", "kenya", "chile", "norway", "egypt", "india", "peru", "spain", "canada", "mexico"],
    },
    Concept {
        stem: "color",
        desc: "color label",
        para: ["color", "hue"],
        values: ["red", "blue", "green", "amber", "violet", "teal", "olive", "maroon", "ivory", "coral", "navy", "beige"],
    },
    Concept {
        stem: "status",
        desc: "status flag",
        para: ["status", "state"],
        values: [
            "active", "pending", "closed", "archived", "draft", "failed", "paused", "queued", "shipped", "expired",
            "blocked", "approved",
        ],
    },
    Concept {
        stem: "year",
        desc: "year value",
        para: ["year", "vintage"],
        values: ["1990", "1991", "1992", "1993", "1994", "1995", "1996", "1997", "1998", "1999", "2000", "2001"],
    },
    Concept {
        stem: "name",
        desc: "person name",
        para: ["name", "person"],
        values: ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "mallory", "oscar"],
    },
    Concept {
        stem: "product",
        desc: "product title",
        para: ["product", "article"],
        values: [
            "laptop", "phone", "tablet", "camera", "printer", "monitor", "router", "speaker", "keyboard", "mouse",
            "charger", "headset",
        ],
    },
    Concept {
        stem: "category",
        desc: "category label",
        para: ["category", "kind"],
        values: [
            "sports", "music", "travel", "health", "finance", "garden", "kitchen", "toys", "books", "games", "beauty",
            "tools",
        ],
    },
    Concept {
        stem: "lang",
        desc: "language code",
        para: ["language", "tongue"],
        values: [
            "english", "french", "german", "spanish", "italian", "dutch", "polish", "czech", "greek", "hindi", "thai",
            "arabic",
        ],
    },
    Concept {
        stem: "brand",
        desc: "brand label",
        para: ["brand", "maker"],
        values: [
            "acme", "zenith", "apex", "nova", "orion", "vertex", "summit", "pioneer", "atlas", "titan", "quantum",
            "stellar",
        ],
    },
    Concept {
        stem: "team",
        desc: "team label",
        para: ["team", "squad"],
        values: [
            "tigers", "eagles", "sharks", "wolves", "bears", "hawks", "lions", "falcons", "panthers", "cobras", "ravens",
            "bulls",
        ],
    },
    Concept {
        stem: "genre",
        desc: "genre label",
        para: ["genre", "style"],
        values: ["jazz", "rock", "blues", "opera", "salsa", "reggae", "techno", "punk", "soul", "funk", "disco", "metal"],
    },
    Concept {
        stem: "month",
        desc: "month name",
        para: ["month", "period"],
        values: [
            "january", "february", "march", "april", "may", "june", "july", "august", "september", "october",
            "november", "december",
        ],
    },
    Concept {
        stem: "currency",
        desc: "currency code",
        para: ["currency", "money"],
        values: ["usd", "eur", "gbp", "jpy", "cny", "inr", "brl", "cad", "aud", "chf", "sek", "nok"],
    },
    Concept {
        stem: "animal",
        desc: "animal type",
        para: ["animal", "species"],
        values: ["cat", "dog", "horse", "cow", "sheep", "goat", "rabbit", "tiger", "zebra", "panda", "koala", "otter"],
    },
    Concept {
        stem: "fruit",
        desc: "fruit type",
        para: ["fruit", "produce"],
        values: ["apple", "banana", "cherry", "grape", "lemon", "mango", "peach", "pear", "plum", "kiwi", "melon", "papaya"],
    },
];

const OWNERS_LOW: [&str; 8] = ["user", "shop", "order", "staff", "event", "vendor", "client", "branch"];
const OWNERS_HIGH: [&str; 9] = ["user", "users", "usr", "shop", "shops", "order", "orders", "staff", "staffs"];
const VERBS: [&str; 4] = ["show", "list", "give me", "find"];

struct Column {
    owner: &'static str,
    concept: usize,
    values: Vec<&'static str>,
}

impl Column {
    fn name(&self) -> String {
        format!("{}_{}", self.owner, CONCEPTS[self.concept].stem)
    }
}

fn schema(rng: &mut rng::Rng, m: usize, cfg: &TaskConfig) -> Vec<Column> {
    let owners: &[&'static str] = match cfg.name_similarity {
        NameSimilarity::High => &OWNERS_HIGH,
        NameSimilarity::Low => &OWNERS_LOW,
    };
    let n_concepts = m.div_ceil(2).min(CONCEPTS.len());
    let concepts: Vec<usize> = rand::seq::index::sample(rng, CONCEPTS.len(), n_concepts).into_vec();
    let mut pairs: HashSet<(usize, usize)> = HashSet::new();
    let mut assign: Vec<(usize, usize)> = Vec::with_capacity(m);
    for i in 0..m {
        // Every chosen concept gets at least one column.
        loop {
            let c = if i < n_concepts { concepts[i] } else { *concepts.choose(rng).unwrap() };
            let o = rng.random_range(0..owners.len());
            if pairs.insert((c, o)) {
                assign.push((c, o));
                break;
            }
        }
    }
    // Values per column: limited by the description length budget and by
    // sharing the concept's pool between its columns.
    let max_by_len = ((cfg.desc_max.saturating_sub(4)) / 2).max(1);
    let min_by_len = (cfg.desc_min.saturating_sub(4)).div_ceil(2).max(1);
    let mut out = Vec::with_capacity(m);
    for &c in &concepts {
        let members: Vec<usize> = (0..m).filter(|&i| assign[i].0 == c).collect();
        let mut pool: Vec<&'static str> = CONCEPTS[c].values.to_vec();
        pool.shuffle(rng);
        let share = (pool.len() / members.len()).min(max_by_len);
        for (k, &i) in members.iter().enumerate() {
            let n = rng.random_range(min_by_len.min(share)..=share);
            let values = pool[k * share..k * share + n].to_vec();
            out.push((i, Column { owner: owners[assign[i].1], concept: c, values }));
        }
    }
    out.sort_by_key(|(i, _)| *i);
    let mut cols: Vec<Column> = out.into_iter().map(|(_, c)| c).collect();
    cols.shuffle(rng);
    cols
}

fn describe(col: &Column) -> String {
    format!("{} of {} : {}", CONCEPTS[col.concept].desc, col.owner, col.values.join(" , "))
}

fn select_phrase(rng: &mut rng::Rng, col: &Column) -> String {
    format!("the {} of each {}", CONCEPTS[col.concept].para.choose(rng).unwrap(), col.owner)
}

/// Generates `cfg.n_samples` column-selection samples.
pub fn gen_colselect(cfg: &TaskConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if cfg.task != TaskKind::Colselect {
        return Err(Error::Config("gen_colselect needs task = colselect".into()));
    }
    if cfg.entity_min < 3 {
        return Err(Error::Config(format!(
            "infeasible: questions reference up to 3 columns but entity_min is {}",
            cfg.entity_min
        )));
    }
    let owners = match cfg.name_similarity {
        NameSimilarity::High => OWNERS_HIGH.len(),
        NameSimilarity::Low => OWNERS_LOW.len(),
    };
    // Each concept's 12 values must cover at least one value per column.
    let cap = CONCEPTS.len() * owners.min(12);
    if cfg.entity_max > cap.min(2 * CONCEPTS.len()) {
        return Err(Error::Config(format!("infeasible: at most {} columns per schema", cap.min(2 * CONCEPTS.len()))));
    }
    if cfg.desc_max < 5 {
        return Err(Error::Config("infeasible: descriptions need at least 5 tokens".into()));
    }
    let mut rng = rng::derive(cfg.seed, &[2]);
    let mut out = Vec::with_capacity(cfg.n_samples);
    let mut group = 0usize;
    while out.len() < cfg.n_samples {
        let m = rng.random_range(cfg.entity_min..=cfg.entity_max);
        let cols = schema(&mut rng, m, cfg);
        let entities: Vec<Entity> = cols.iter().map(|c| Entity { name: c.name(), description: describe(c) }).collect();
        let group_size = *[1usize, 2, 2, 3].choose(&mut rng).unwrap();
        for k in 0..group_size.min(cfg.n_samples - out.len()) {
            // 0: one select, 1: select + filter, 2: two selects, 3: two selects + filter.
            let form = *[0usize, 1, 1, 2, 3].choose(&mut rng).unwrap();
            let n_sel = if form >= 2 { 2 } else { 1 };
            let filtered = form % 2 == 1;
            let picked: Vec<usize> = rand::seq::index::sample(&mut rng, m, n_sel + filtered as usize).into_vec();
            let sels = &picked[..n_sel];
            let verb = VERBS.choose(&mut rng).unwrap();
            let mut input = format!("{verb} {}", select_phrase(&mut rng, &cols[sels[0]]));
            let mut target = format!("select {}", marker(sels[0]));
            if n_sel == 2 {
                input.push_str(&format!(" and {}", select_phrase(&mut rng, &cols[sels[1]])));
                target.push_str(&format!(" , {}", marker(sels[1])));
            }
            target.push_str(" from t");
            if filtered {
                let w = picked[n_sel];
                let value = cols[w].values.choose(&mut rng).unwrap();
                input.push_str(&format!(
                    " whose {} is {value}",
                    CONCEPTS[cols[w].concept].para.choose(&mut rng).unwrap()
                ));
                target.push_str(&format!(" where {} = {value}", marker(w)));
            }
            out.push(Sample { id: format!("cs-{group:06}-{k}"), input, target, entities: entities.clone() });
        }
        group += 1;
    }
    Ok(out)
}
