//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`), whose
//! output stream is specified independently of platform and word size, so
//! datasets and initializations are reproducible everywhere. Sub-streams are
//! derived by mixing a parent seed with a stream label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, labels...)`.
pub fn derive(seed: u64, labels: &[u64]) -> Rng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &l in labels {
        h = splitmix(h ^ splitmix(l.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    seeded(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
