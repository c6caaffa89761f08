//! Deterministic seed fan-out.
//!
//! A single run seed is split into independent sub-streams by label and
//! counter, so that adding a consumer in one module never shifts the random
//! numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Seed(pub u64);

impl Seed {
    pub fn child(self, label: &str) -> Seed {
        Seed(splitmix64(self.0 ^ splitmix64(fnv1a(label))))
    }

    pub fn index(self, i: u64) -> Seed {
        Seed(splitmix64(self.0.wrapping_add(splitmix64(i.wrapping_add(1)))))
    }

    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
