#![allow(dead_code)]

use fedsim_core::{GruLmConfig, ParamSet, SeededRng, Tensor2};

pub fn model(vocab: usize, dim: usize, layers: usize, tied: bool, bptt: usize) -> GruLmConfig {
    GruLmConfig { vocab_size: vocab, embed_dim: dim, hidden_dim: dim, num_layers: layers, tied, bptt_len: bptt, init_scale: 0.1 }
}

/// Every entry (biases included) uniform in `[-scale, scale]`.
pub fn random_params(cfg: &GruLmConfig, scale: f64, rng: &mut SeededRng) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (name, (r, c)) in cfg.layout() {
        let data = (0..r * c).map(|_| rng.uniform(-scale, scale)).collect();
        p.push(name, Tensor2::from_vec(r, c, data).unwrap()).unwrap();
    }
    p
}

pub fn random_tokens(n: usize, vocab: usize, rng: &mut SeededRng) -> Vec<u32> {
    (0..n).map(|_| rng.below(vocab) as u32).collect()
}

/// A set of named tensors with arbitrary shapes, for aggregation tests.
pub fn random_set(shapes: &[(usize, usize)], scale: f64, rng: &mut SeededRng) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (i, &(r, c)) in shapes.iter().enumerate() {
        let data = (0..r * c).map(|_| rng.uniform(-scale, scale)).collect();
        p.push(format!("layer{i}"), Tensor2::from_vec(r, c, data).unwrap()).unwrap();
    }
    p
}
