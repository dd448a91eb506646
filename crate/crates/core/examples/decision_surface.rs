//! Decision surfaces around test images: a random plane against a plane whose
//! second axis is the adversarial direction. Along +j the adversarial plane
//! reaches the boundary much sooner. Grids are written for the first sample.
//!
//!     cargo run --release --example decision_surface -- [model.ckpt] [out_dir]

use std::path::{Path, PathBuf};

use decision_surface::attacks::Objective;
use decision_surface::data::load_idx;
use decision_surface::nn::{Network, NetworkSpec};
use decision_surface::surface::{eval_grid, extract_boundary, make_plane, write_grid, BetaSource, Space, SurfaceFunction};
use decision_surface::training::{train, TrainConfig};
use decision_surface::Result;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    let net = match args.first() {
        Some(p) => Network::load(Path::new(p))?,
        None => {
            let train_set = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
            let cfg = TrainConfig { epochs: 5, learning_rate: 0.1, ..TrainConfig::default() };
            train(&Network::init(NetworkSpec::mnist_mlp(), 0)?, &train_set, &cfg)?.0
        }
    };
    let out = PathBuf::from(args.get(1).map_or("surface_out", String::as_str));
    std::fs::create_dir_all(&out).map_err(|e| decision_surface::Error::Io { path: out.clone(), source: e })?;

    let (range, step) = (20, 0.02);
    let mut shorter = 0;
    let mut compared = 0;
    println!("{:>6} {:>10} {:>12}", "sample", "random", "adversarial");
    for (k, s) in test.samples.iter().take(20).enumerate() {
        let mut distance = [f64::INFINITY; 2];
        for (slot, beta) in [BetaSource::Random, BetaSource::Attack(Objective::CwMargin)].into_iter().enumerate() {
            let plane = make_plane(&net, &s.features, s.label, Space::Input, beta, k as u64)?.with_label(format!("test[{k}]"));
            let grid = eval_grid(&net, &plane, range, range, step, SurfaceFunction::DecisionMargin)?;
            if let Some(c) = extract_boundary(&grid)?.first_crossing {
                distance[slot] = c.distance;
            }
            if k == 0 {
                write_grid(&grid, &out.join(format!("margin_{}.grid", beta.name())))?;
                let ce = eval_grid(&net, &plane, range, range, step, SurfaceFunction::CrossEntropy)?;
                write_grid(&ce, &out.join(format!("ce_{}.grid", beta.name())))?;
            }
        }
        let show = |d: f64| if d.is_finite() { format!("{d:.3}") } else { "none".into() };
        println!("{k:>6} {:>10} {:>12}", show(distance[0]), show(distance[1]));
        compared += 1;
        if distance[1] < distance[0] {
            shorter += 1;
        }
    }
    println!("adversarial crossing closer in {shorter}/{compared} samples; grids in {}", out.display());
    Ok(())
}
