#![allow(dead_code)]

pub mod checks;

use std::path::{Path, PathBuf};

use decision_surface::data::{load_idx, Dataset};
use decision_surface::nn::{Activation, LayerSpec, Network, NetworkSpec, PoolKind, Shape};

/// Central differences of a scalar function.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central difference of a vector function along `v`.
pub fn directional_diff(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let up: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let down: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
    f(&up).iter().zip(f(&down)).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// Largest elementwise error relative to `max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

pub fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn mnist_train() -> Dataset {
    let d = mnist_dir();
    load_idx(&d.join("train-images-idx3-ubyte"), &d.join("train-labels-idx1-ubyte")).expect("mnist train split")
}

pub fn mnist_test() -> Dataset {
    let d = mnist_dir();
    load_idx(&d.join("t10k-images-idx3-ubyte"), &d.join("t10k-labels-idx1-ubyte")).expect("mnist test split")
}

/// 6 -> 5 softplus -> 4 tanh -> 3.
pub fn small_smooth_net(seed: u64) -> Network {
    let spec = NetworkSpec {
        input: Shape::flat(6),
        layers: vec![
            LayerSpec::Dense { units: 5, activation: Activation::Softplus },
            LayerSpec::Dense { units: 4, activation: Activation::Tanh },
            LayerSpec::Dense { units: 3, activation: Activation::Identity },
        ],
        classes: 3,
    };
    Network::init(spec, seed).unwrap()
}

/// 1x6x6 -> conv 2x3x3 (stride 1, pad 1) softplus -> avg pool 2 -> dense 3.
pub fn small_conv_net(seed: u64) -> Network {
    let spec = NetworkSpec {
        input: Shape::new(1, 6, 6),
        layers: vec![
            LayerSpec::Conv { channels: 2, kernel: 3, stride: 1, padding: 1, activation: Activation::Softplus },
            LayerSpec::Pool { kind: PoolKind::Avg, window: 2 },
            LayerSpec::Dense { units: 3, activation: Activation::Identity },
        ],
        classes: 3,
    };
    Network::init(spec, seed).unwrap()
}

/// Deterministic pseudo-random values in `[lo, hi)`.
pub fn values(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
