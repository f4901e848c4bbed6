#![allow(dead_code)]

use ppc_core::lm::{LMConfig, LanguageModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Neumaier-compensated sum; error independent of the term count.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Softmax by shifting with the row max and a compensated normalizer.
pub fn reference_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z = compensated_sum(e.iter().copied());
    e.iter().map(|x| x / z).collect()
}

pub fn reference_log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + compensated_sum(row.iter().map(|x| (x - max).exp())).ln();
    row.iter().map(|x| x - lse).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn tiny_config(vocab: usize, prefix_len: usize) -> LMConfig {
    LMConfig {
        vocab_size: vocab,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        context_len: 32,
        prefix_len,
    }
}

pub fn tiny_lm(vocab: usize, prefix_len: usize, seed: u64) -> LanguageModel<f64> {
    LanguageModel::init(tiny_config(vocab, prefix_len), seed).unwrap()
}
