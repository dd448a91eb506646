//! Jacobian and Hessian statistics of a naturally trained softplus MLP next to
//! a Jacobian-regularized one, on MNIST test images.
//!
//!     cargo run --release --example robustness_indicator -- [epochs] [samples]

use std::path::Path;

use decision_surface::data::load_idx;
use decision_surface::indicator::{build_report, ReportConfig};
use decision_surface::nn::{Network, NetworkSpec};
use decision_surface::pipeline::ordering_summary;
use decision_surface::training::{train, TrainConfig, TrainMode};
use decision_surface::Result;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map_or(5, |a| a.parse().expect("epochs"));
    let samples: usize = args.get(1).map_or(10, |a| a.parse().expect("samples"));

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let train_set = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;

    let init = Network::init(NetworkSpec::mnist_mlp(), 0)?;
    let base = TrainConfig { epochs, learning_rate: 0.1, ..TrainConfig::default() };
    let (natural, _) = train(&init, &train_set, &base)?;
    let (robust, _) = train(&init, &train_set, &TrainConfig { mode: TrainMode::JacobianReg, ..base })?;

    let rc = ReportConfig { sample_count: samples, ..ReportConfig::default() };
    let a = build_report(&natural, &test, &rc)?;
    let b = build_report(&robust, &test, &rc)?;
    print!("{}", ordering_summary("natural", &a, "jacobian_reg", &b));
    Ok(())
}
