//! The whole command pipeline on synthetic blobs, driven from a TOML string:
//! train, attack table, decision surface and indicator, all written to a
//! temporary run directory.
//!
//!     cargo run --release --example blobs_quickstart

use decision_surface::config::Config;
use decision_surface::pipeline::{cmd_attack, cmd_indicator, cmd_surface, cmd_train};
use decision_surface::Result;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const CONFIG: &str = r#"
[data]
source = "blobs"
blobs_classes = 3
blobs_dim = 2

[model]
preset = "blobs-mlp"

[train]
epochs = 40
learning_rate = 0.5
batch_size = 16

[attack]
epsilons = [0.0, 0.05, 0.1]

[surface]
beta = "random"
step = 0.05

[indicator]
samples = 20
images = false
"#;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("decsurf_blobs_quickstart");
    let cfg = Config::from_toml_str(CONFIG, &[format!("run.out_dir={:?}", dir.display().to_string())])?;

    let trained = cmd_train(&cfg)?;
    println!("final train accuracy {:.3}", trained.history.epochs.last().map_or(0.0, |e| e.train_accuracy));
    let ckpt = dir.join("model.ckpt");

    print!("{}", cmd_attack(&cfg, std::slice::from_ref(&ckpt))?.to_text());

    let surface = cmd_surface(&cfg, &ckpt)?;
    match surface.boundary.and_then(|b| b.first_crossing) {
        Some(c) => println!("boundary reached at distance {:.3} along +j", c.distance),
        None => println!("no boundary within the grid along +j"),
    }

    let report = &cmd_indicator(&cfg, std::slice::from_ref(&ckpt))?.reports[0].1;
    println!("mean |J|_1 {:.3}, certified at eps 0.1: {:.2}", report.aggregate.jacobian_l1, report.aggregate.certified_fraction);
    println!("outputs in {}", dir.display());
    Ok(())
}
