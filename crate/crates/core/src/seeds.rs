//! Seed derivation. One root seed fans out into independent streams so
//! that configurations differing only in ablation flags share data,
//! initialization and noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;

const DATA: u64 = 0x6461_7461;
const INIT: u64 = 0x696e_6974;
const NOISE: u64 = 0x6e6f_6973;
const SHUFFLE: u64 = 0x7368_7566;
const TEACHER: u64 = 0x7465_6163;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of integers into a new seed.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-component seeds expanded from `run.seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub teacher_init: u64,
    pub noise: u64,
    pub shuffle: u64,
}

impl Seeds {
    pub fn from_root(root: u64) -> Self {
        Self {
            data: derive(root, &[DATA]),
            init: derive(root, &[INIT]),
            teacher_init: derive(root, &[TEACHER, INIT]),
            noise: derive(root, &[NOISE]),
            shuffle: derive(root, &[SHUFFLE]),
        }
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        let mut s = Self::from_root(cfg.run.seed);
        if let Some(n) = cfg.sdmoe.noise_seed {
            s.noise = n;
        }
        s
    }
}
