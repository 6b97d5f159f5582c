#![allow(dead_code)]

pub mod oracle;

use attnsteer::harness::data::{SyntheticImage, FEAT_DIM};
use attnsteer::harness::vocab;
use attnsteer::model::{init_model, AttentionStack, ModelConfig, ModelParams, SeqLayout};
use attnsteer::numcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

/// An untrained model with large enough weights that attention is far from
/// uniform.
pub fn small_model(layers: usize, heads: usize, grid: usize, d: usize, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        grid,
        max_seq: grid * grid + 16,
        seed,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    init_model(&cfg).unwrap()
}

/// An image of pure noise features, with no objects.
pub fn noise_image(grid: usize, seed: u64) -> SyntheticImage {
    let mut r = rng(seed ^ 0xfeed);
    SyntheticImage {
        grid,
        objects: Vec::new(),
        features: gaussian(&[grid * grid, FEAT_DIM], 1.0, &mut r),
    }
}

pub fn question(seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    let a = r.random_range(0..vocab::N_SHAPES);
    let b = (a + 1 + r.random_range(0..vocab::N_SHAPES - 1)) % vocab::N_SHAPES;
    vocab::question(a, b)
}

/// A random non-negative map with at least one positive entry.
pub fn random_map(grid: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data: Vec<f64> = (0..grid * grid)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() })
        .collect();
    data[rng.random_range(0..grid * grid)] = 0.5 + rng.random::<f64>();
    Tensor::new(vec![grid, grid], data).unwrap()
}

pub fn random_points(rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let n = rng.random_range(1..6);
    (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect()
}

/// Random causal row-stochastic maps.
pub fn random_stack(layers: usize, heads: usize, n_v: usize, n_t: usize, rng: &mut ChaCha8Rng) -> AttentionStack {
    let seq = n_v + n_t;
    let maps = (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| {
                    let mut data = vec![0.0; seq * seq];
                    for r in 0..seq {
                        let row = &mut data[r * seq..r * seq + r + 1];
                        row.iter_mut().for_each(|v| *v = rng.random::<f64>());
                        let z: f64 = row.iter().sum();
                        row.iter_mut().for_each(|v| *v /= z);
                    }
                    Tensor::new(vec![seq, seq], data).unwrap()
                })
                .collect()
        })
        .collect();
    AttentionStack {
        maps,
        layout: SeqLayout {
            n_visual: n_v,
            n_text: n_t,
            seq_len: seq,
        },
    }
}
