//! Loss surface in parameter space with filter-normalized directions, for a
//! small classifier on synthetic blobs. Prints a coarse character map of the
//! cross-entropy around the trained weights and writes the grid file.
//!
//!     cargo run --release --example parameter_surface -- [out.grid]

use decision_surface::data::synth_blobs;
use decision_surface::nn::{Network, NetworkSpec};
use decision_surface::surface::{eval_grid, make_plane, write_grid, BetaSource, Space, SurfaceFunction};
use decision_surface::training::{train, TrainConfig};
use decision_surface::Result;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> Result<()> {
    let ds = synth_blobs(3, 60, 2, 0.08, 1)?;
    let cfg = TrainConfig { epochs: 60, learning_rate: 0.5, batch_size: 16, ..TrainConfig::default() };
    let (net, _) = train(&Network::init(NetworkSpec::blobs_mlp(2, 3), 0)?, &ds, &cfg)?;

    let s = &ds.samples[0];
    let plane = make_plane(&net, &s.features, s.label, Space::Parameter, BetaSource::Random, 7)?.with_label("blobs[0]");
    println!("cos(alpha, beta) = {:.2e}", plane.cosine());
    let grid = eval_grid(&net, &plane, 10, 10, 0.1, SurfaceFunction::CrossEntropy)?;

    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    let max = grid.values.iter().flatten().fold(0.0f64, |m, v| m.max(v.ln_1p()));
    for row in &grid.values {
        let line: String = row.iter().map(|v| shades[((v.ln_1p() / max) * 9.0).round() as usize]).collect();
        println!("{line}");
    }
    println!("loss at the trained weights: {:.4}", grid.at(0, 0));

    let out = std::env::args().nth(1).unwrap_or_else(|| "parameter_surface.grid".into());
    write_grid(&grid, std::path::Path::new(&out))?;
    println!("wrote {out}");
    Ok(())
}
