//! Trains the convolutional MNIST preset, naturally or with the margin
//! Jacobian penalty, and saves the checkpoint.
//!
//!     cargo run --release --example train_mnist -- [mode] [epochs] [penalty] [out.ckpt]
//!
//! `mode` is one of natural, jacobian_reg, ce_grad_reg, adv_train, minmax.

use std::path::{Path, PathBuf};

use decision_surface::data::load_idx;
use decision_surface::nn::{Network, NetworkSpec};
use decision_surface::training::{train_with, TrainConfig};
use decision_surface::Result;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());

    let cfg = TrainConfig {
        mode: arg(0, "natural").parse()?,
        epochs: arg(1, "5").parse().expect("epochs"),
        penalty: arg(2, "500").parse().expect("penalty"),
        ..TrainConfig::default()
    };
    let out = PathBuf::from(arg(3, &format!("{}.ckpt", cfg.mode)));

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;

    let net = Network::init(NetworkSpec::mnist_conv(), cfg.seed)?;
    let (net, history) = train_with(&net, &train, &cfg, Some(&test), |_, _| Ok(()))?;
    print!("{}", history.to_table());
    println!("mean epoch time {:.2}s", history.mean_epoch_seconds());
    net.save(&out)?;
    println!("saved {}", out.display());
    Ok(())
}
