#![allow(dead_code)]

use emofuse::data::{generate_synthetic, DialogueRecord};
use emofuse::seeds::Seeds;
use emofuse::{ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A configuration small enough for many short training runs.
pub fn small_config(seed: u64) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.model.d_t = 8;
    c.model.d_a = 6;
    c.model.d_v = 5;
    c.model.d_s = 8;
    c.model.heads = 2;
    c.model.fusion_layers = 1;
    c.model.ffn_hidden = Some(16);
    c.sdmoe.experts = 3;
    c.optim.lr = 3e-3;
    c.optim.batch_size = 4;
    c.optim.epochs = 10;
    c.data.synthetic_utterances = 60;
    c.data.dialogue_min_len = 3;
    c.data.dialogue_max_len = 6;
    c.run.seed = seed;
    c.resolved().expect("valid small config")
}

pub fn corpus(cfg: &ModelConfig) -> Vec<DialogueRecord> {
    generate_synthetic(cfg, Seeds::from_config(cfg).data).expect("synthetic corpus")
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

/// A random probability row of length `n`, bounded away from zero.
pub fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}
