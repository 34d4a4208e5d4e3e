//! Group-stratified train/dev/test split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::sample::Sample;
use crate::rng;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Split {
    pub fn parts(&self) -> [&[Sample]; 3] {
        [&self.train, &self.dev, &self.test]
    }
}

/// Splits 60/20/20 so that no group (project or schema) lands in two parts.
///
/// Groups are assigned largest first to the part with the biggest remaining
/// deficit, then singleton groups fill the parts exactly, so sizes are within
/// one sample of the ideal whenever enough singletons exist.
pub fn split_samples(samples: &[Sample], seed: u64) -> Split {
    let n = samples.len();
    let dev_n = (n as f64 * 0.2).round() as usize;
    let test_n = (n as f64 * 0.2).round() as usize;
    let want = [n - dev_n - test_n, dev_n, test_n];

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.group()).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    let mut rng = rng::derive(seed, &[3]);
    groups.shuffle(&mut rng);
    // Stable sort keeps the shuffled order among equal sizes.
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));

    let mut have = [0usize; 3];
    let mut parts: [Vec<usize>; 3] = Default::default();
    for g in groups {
        let k = (0..3)
            .max_by_key(|&k| (want[k] as i64 - have[k] as i64, std::cmp::Reverse(k)))
            .unwrap();
        have[k] += g.len();
        parts[k].extend(g);
    }
    let take = |idx: &Vec<usize>| {
        let mut idx = idx.clone();
        idx.sort_unstable();
        idx.into_iter().map(|i| samples[i].clone()).collect::<Vec<_>>()
    };
    Split { train: take(&parts[0]), dev: take(&parts[1]), test: take(&parts[2]) }
}
