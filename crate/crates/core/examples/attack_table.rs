//! Accuracy of one or more checkpoints under FGSM, BIM and CW-PGD at
//! epsilon 0.1, 0.2 and 0.3 on the MNIST test split.
//!
//!     cargo run --release --example attack_table -- natural.ckpt jacobian_reg.ckpt
//!
//! Without arguments a softplus MLP is trained for a few epochs first.

use std::path::{Path, PathBuf};

use decision_surface::attacks::{natural_accuracy, robust_accuracy, AttackSpec};
use decision_surface::data::load_idx;
use decision_surface::nn::{Network, NetworkSpec};
use decision_surface::training::{train, TrainConfig};
use decision_surface::Result;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?.take(300);

    let paths: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let models: Vec<(String, Network)> = if paths.is_empty() {
        let train_set = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
        let cfg = TrainConfig { epochs: 5, learning_rate: 0.1, ..TrainConfig::default() };
        let (net, _) = train(&Network::init(NetworkSpec::mnist_mlp(), 0)?, &train_set, &cfg)?;
        vec![("mlp (5 epochs)".into(), net)]
    } else {
        paths.iter().map(|p| Ok((p.display().to_string(), Network::load(p)?))).collect::<Result<_>>()?
    };

    let eps = [0.1, 0.2, 0.3];
    let mut specs = Vec::new();
    for e in eps {
        specs.push(("fgsm", AttackSpec::fgsm(e)));
    }
    for e in eps {
        specs.push(("bim", AttackSpec::bim(e, 0.1, 10)));
    }
    for e in eps {
        specs.push(("cw_pgd", AttackSpec::cw_pgd(e, 0.1, 10)));
    }

    print!("{:<24} {:>8}", "model", "natural");
    for (name, s) in &specs {
        print!(" {:>10}", format!("{name}@{}", s.epsilon));
    }
    println!();
    for (name, net) in &models {
        print!("{name:<24} {:>8.3}", natural_accuracy(net, &test)?);
        for (_, s) in &specs {
            print!(" {:>10.3}", robust_accuracy(net, &test, s)?);
        }
        println!();
    }
    Ok(())
}
