use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use decision_surface::config::Config;
use decision_surface::pipeline;
use decision_surface::Result;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Decision surfaces, adversarial attacks and robustness indicators.
#[derive(Parser)]
#[command(name = "decsurf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt, history.tsv and a manifest.
    Train(Common),
    /// Accuracy table of checkpoints under every configured attack.
    Attack(Common),
    /// Loss and margin grids on a plane through one test sample.
    Surface(Common),
    /// Jacobian/Hessian robustness report for sampled test inputs.
    Indicator(Common),
    /// Train if needed, then the attack table and the indicator report.
    Eval(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.mode=jacobian_reg`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Checkpoint to evaluate (repeatable).
    #[arg(long = "checkpoint", value_name = "PATH")]
    checkpoints: Vec<PathBuf>,
    /// Output directory (same as `--set run.out_dir=...`).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut overrides = self.overrides.clone();
        if let Some(out) = &self.out {
            overrides.push(format!("run.out_dir={:?}", out.display().to_string()));
        }
        Config::load(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.load()?;
            let out = pipeline::cmd_train(&cfg)?;
            print!("{}", out.history.to_table());
            println!("checkpoint: {}", cfg.run.out_dir.join("model.ckpt").display());
        }
        Command::Attack(c) => {
            let cfg = c.load()?;
            let table = pipeline::cmd_attack(&cfg, &pipeline::resolve_checkpoints(&cfg, &c.checkpoints))?;
            print!("{}", table.to_text());
        }
        Command::Surface(c) => {
            let cfg = c.load()?;
            let ckpt = &pipeline::resolve_checkpoints(&cfg, &c.checkpoints)[0];
            let out = pipeline::cmd_surface(&cfg, ckpt)?;
            for g in &out.grids {
                println!("grid: {}", g.display());
            }
            if let Some(b) = &out.boundary {
                match b.first_crossing {
                    Some(x) => println!("first crossing along +j: {:.6}", x.distance),
                    None => println!("first crossing along +j: none within the grid"),
                }
            }
        }
        Command::Indicator(c) => {
            let cfg = c.load()?;
            let out = pipeline::cmd_indicator(&cfg, &pipeline::resolve_checkpoints(&cfg, &c.checkpoints))?;
            for (label, r) in &out.reports {
                let a = &r.aggregate;
                println!(
                    "{label}: mean |J|_1 {:.4e}  mean sum|lambda| {:.4e}  J zero ratio {:.4}  certified {:.4}",
                    a.jacobian_l1, a.hessian_l1, a.jacobian_zero_ratio, a.certified_fraction
                );
            }
            if let Some(o) = &out.ordering {
                print!("{o}");
            }
        }
        Command::Eval(c) => {
            let cfg = c.load()?;
            let out = pipeline::cmd_eval(&cfg, &c.checkpoints)?;
            print!("{}", out.table.to_text());
            if let Some(o) = &out.indicator.ordering {
                print!("{o}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
