//! The pipelines behind the `decsurf` commands.
//!
//! Every command writes into `run.out_dir` and finishes with
//! `<command>.manifest.toml`, which records the resolved configuration, the
//! seed, checksums of every input and output, the tool version and wall time.
//! Outputs are plain text except the Jacobian graymaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{self, AttackSpec};
use crate::config::Config;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::indicator::{self, ReportConfig, RobustnessReport};
use crate::nn::{Network, NetworkSpec};
use crate::surface::{self, SurfaceFunction};
use crate::training::{self, TrainHistory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub wall_seconds: f64,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the run directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub config: Config,
}

impl RunManifest {
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.message()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Bookkeeping for one command invocation.
struct Run<'a> {
    cfg: &'a Config,
    dir: PathBuf,
    start: Instant,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a Config) -> Result<Self> {
        let dir = cfg.run.out_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Run { cfg, dir, start: Instant::now(), inputs: BTreeMap::new(), outputs: BTreeMap::new() })
    }

    fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    fn finish(mut self, command: &str) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.cfg.run.seed,
            wall_seconds: self.start.elapsed().as_secs_f64(),
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
            config: self.cfg.clone(),
        };
        let path = self.dir.join(format!("{command}.manifest.toml"));
        fs::write(&path, manifest.to_toml_string()).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

fn config_error(key: &str, reason: impl ToString) -> Error {
    Error::Config { key: key.to_string(), reason: reason.to_string() }
}

/// Train and test splits described by the `data` section.
pub fn load_data(cfg: &Config) -> Result<(Dataset, Dataset)> {
    load_data_into(cfg, &mut BTreeMap::new())
}

fn load_data_into(cfg: &Config, inputs: &mut BTreeMap<String, String>) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let limit = |ds: Dataset, n: usize| if n == 0 { ds } else { ds.take(n) };
    let (train, test) = match d.source.as_str() {
        "mnist" => {
            let f = |name: &str| d.mnist_dir.join(name);
            for name in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
                let bytes = fs::read(f(name)).map_err(|e| Error::io(f(name), e))?;
                inputs.insert(f(name).display().to_string(), sha256_hex(&bytes));
            }
            let train = data::load_idx(&f("train-images-idx3-ubyte"), &f("train-labels-idx1-ubyte"))?;
            let test = data::load_idx(&f("t10k-images-idx3-ubyte"), &f("t10k-labels-idx1-ubyte"))?;
            (train, test)
        }
        "blobs" => {
            // One draw so both splits share the class centers.
            let all = data::synth_blobs(d.blobs_classes, d.blobs_train_per_class + d.blobs_test_per_class, d.blobs_dim, d.blobs_spread, cfg.run.seed)?;
            let per = d.blobs_train_per_class + d.blobs_test_per_class;
            let (mut tr, mut te) = (Vec::new(), Vec::new());
            for (i, s) in all.samples.into_iter().enumerate() {
                if i % per < d.blobs_train_per_class { tr.push(s) } else { te.push(s) }
            }
            (Dataset::new(tr, all.classes, all.shape)?, Dataset::new(te, all.classes, all.shape)?)
        }
        other => return Err(config_error("data.source", format!("unknown source `{other}`"))),
    };
    Ok((limit(train, d.train_limit), limit(test, d.test_limit)))
}

fn check_compatible(net: &Network, ds: &Dataset, origin: &Path) -> Result<()> {
    if net.input_len() != ds.shape.len() || net.classes() != ds.classes {
        return Err(Error::Shape(format!(
            "{}: model takes {} inputs and {} classes, dataset has {} inputs and {} classes",
            origin.display(),
            net.input_len(),
            net.classes(),
            ds.shape.len(),
            ds.classes
        )));
    }
    Ok(())
}

fn load_checkpoint(run: &mut Run, path: &Path, ds: &Dataset) -> Result<Network> {
    let bytes = run.read_input(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "checkpoint is not UTF-8"))?;
    let net = Network::from_checkpoint_str(&text, path)?;
    check_compatible(&net, ds, path)?;
    Ok(net)
}

/// Checkpoints named on the command line, else `model.checkpoint`, else
/// `<out_dir>/model.ckpt`.
pub fn resolve_checkpoints(cfg: &Config, given: &[PathBuf]) -> Vec<PathBuf> {
    if !given.is_empty() {
        given.to_vec()
    } else if !cfg.model.checkpoint.as_os_str().is_empty() {
        vec![cfg.model.checkpoint.clone()]
    } else {
        vec![cfg.run.out_dir.join("model.ckpt")]
    }
}

/// Short unique names for checkpoints, used for table rows and subdirectories.
fn checkpoint_labels(paths: &[PathBuf]) -> Vec<String> {
    let stem = |p: &PathBuf| p.file_stem().map_or("model".to_string(), |s| s.to_string_lossy().into_owned());
    let parent = |p: &PathBuf| p.parent().and_then(Path::file_name).map(|s| s.to_string_lossy().into_owned());
    let stems: Vec<String> = paths.iter().map(stem).collect();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = &stems[i];
            if stems.iter().filter(|t| *t == s).count() == 1 {
                s.clone()
            } else {
                match parent(p) {
                    Some(d) => format!("{d}_{s}"),
                    None => format!("{i}_{s}"),
                }
            }
        })
        .collect()
}

pub struct TrainOutcome {
    pub network: Network,
    pub history: TrainHistory,
    pub manifest: RunManifest,
}

pub fn cmd_train(cfg: &Config) -> Result<TrainOutcome> {
    let mut run = Run::new(cfg)?;
    let (network, history) = train_in(&mut run)?;
    Ok(TrainOutcome { network, history, manifest: run.finish("train")? })
}

fn train_in(run: &mut Run) -> Result<(Network, TrainHistory)> {
    let cfg = run.cfg;
    let tc = cfg.train_config()?;
    let (train, test) = load_data_into(cfg, &mut run.inputs)?;
    let spec = NetworkSpec::preset(&cfg.model.preset, train.shape, train.classes).map_err(|e| config_error("model.preset", e))?;
    let net = Network::init(spec, cfg.run.seed)?;
    check_compatible(&net, &train, Path::new(&cfg.model.preset))?;
    info!("training {} ({} parameters) on {} samples, mode {}", cfg.model.preset, net.params().len(), train.len(), tc.mode);
    let every = cfg.train.checkpoint_every;
    let (net, history) = training::train_with(&net, &train, &tc, Some(&test), |stats, net| {
        if every > 0 && (stats.epoch + 1) % every == 0 {
            run.write(&format!("checkpoints/epoch_{:03}.ckpt", stats.epoch + 1), net.to_checkpoint_string().as_bytes())?;
        }
        Ok(())
    })?;
    run.write("model.ckpt", net.to_checkpoint_string().as_bytes())?;
    run.write("history.tsv", history.to_table().as_bytes())?;
    run.write("timing.tsv", history.timing_table().as_bytes())?;
    Ok((net, history))
}

/// Accuracy table: one row per model, natural accuracy then one column per
/// (method, epsilon).
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, f64, Vec<f64>)>,
}

impl AccuracyTable {
    pub fn to_text(&self) -> String {
        let mut s = String::from("model\tnatural");
        for c in &self.columns {
            let _ = write!(s, "\t{c}");
        }
        s.push('\n');
        for (name, natural, accs) in &self.rows {
            let _ = write!(s, "{name}\t{natural:.4}");
            for a in accs {
                let _ = write!(s, "\t{a:.4}");
            }
            s.push('\n');
        }
        s
    }

    /// Accuracy of `row` under the column named `column` (`natural` allowed).
    pub fn get(&self, row: usize, column: &str) -> Option<f64> {
        let (_, natural, accs) = self.rows.get(row)?;
        if column == "natural" {
            return Some(*natural);
        }
        self.columns.iter().position(|c| c == column).map(|k| accs[k])
    }
}

pub fn column_name(spec: &AttackSpec) -> String {
    format!("{}@{}", spec.method, spec.epsilon)
}

pub fn cmd_attack(cfg: &Config, checkpoints: &[PathBuf]) -> Result<AccuracyTable> {
    let mut run = Run::new(cfg)?;
    let table = attack_in(&mut run, checkpoints)?;
    run.finish("attack")?;
    Ok(table)
}

fn attack_in(run: &mut Run, checkpoints: &[PathBuf]) -> Result<AccuracyTable> {
    let cfg = run.cfg;
    let specs = cfg.attack_specs()?;
    let (_, test) = load_data_into(cfg, &mut run.inputs)?;
    let test = if cfg.attack.limit == 0 { test } else { test.take(cfg.attack.limit) };
    let labels = checkpoint_labels(checkpoints);
    let mut rows = Vec::new();
    for (path, label) in checkpoints.iter().zip(labels) {
        let net = load_checkpoint(run, path, &test)?;
        let natural = attacks::natural_accuracy(&net, &test)?;
        let mut accs = Vec::with_capacity(specs.len());
        for spec in &specs {
            let a = attacks::robust_accuracy(&net, &test, spec)?;
            info!("{label}: {} -> {a:.4}", column_name(spec));
            accs.push(a);
        }
        rows.push((label, natural, accs));
    }
    let table = AccuracyTable { columns: specs.iter().map(column_name).collect(), rows };
    run.write("attack_table.tsv", table.to_text().as_bytes())?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceOutcome {
    pub grids: Vec<PathBuf>,
    pub boundary: Option<surface::Boundary>,
}

pub fn cmd_surface(cfg: &Config, checkpoint: &Path) -> Result<SurfaceOutcome> {
    let mut run = Run::new(cfg)?;
    let (_, test) = load_data_into(cfg, &mut run.inputs)?;
    let net = load_checkpoint(&mut run, checkpoint, &test)?;
    let s = &cfg.surface;
    let sample = test
        .samples
        .get(s.sample)
        .ok_or_else(|| config_error("surface.sample", format!("index {} out of range for {} test samples", s.sample, test.len())))?;
    let plane = surface::make_plane(&net, &sample.features, sample.label, cfg.space()?, cfg.beta_source()?, cfg.run.seed)?
        .with_label(format!("{}:test[{}]", checkpoint.display(), s.sample));
    let mut out = SurfaceOutcome { grids: Vec::new(), boundary: None };
    for function in cfg.surface_functions()? {
        let grid = surface::eval_grid(&net, &plane, s.i_range, s.j_range, s.step, function)?;
        out.grids.push(run.write(&format!("surface_{function}.grid"), surface::grid_to_string(&grid).as_bytes())?);
        if s.boundary && function == SurfaceFunction::DecisionMargin {
            let b = surface::extract_boundary(&grid)?;
            run.write("boundary.tsv", boundary_text(&b, s.step).as_bytes())?;
            out.boundary = Some(b);
        }
    }
    run.finish("surface")?;
    Ok(out)
}

/// `# first_crossing` header, then one `polyline i j` row per vertex.
pub fn boundary_text(b: &surface::Boundary, step: f64) -> String {
    let mut s = String::from("# decision boundary (margin = 0), lattice coordinates\n");
    match &b.first_crossing {
        Some(c) => {
            let _ = writeln!(s, "# first_crossing_j: {:.9e}", c.j);
            let _ = writeln!(s, "# first_crossing_distance: {:.9e}", c.distance);
        }
        None => s.push_str("# first_crossing_j: none\n# first_crossing_distance: none\n"),
    }
    let _ = writeln!(s, "# step: {step}");
    s.push_str("polyline\ti\tj\n");
    for (k, line) in b.polylines().iter().enumerate() {
        for (i, j) in line {
            let _ = writeln!(s, "{k}\t{i:.9e}\t{j:.9e}");
        }
    }
    s
}

pub struct IndicatorOutcome {
    pub reports: Vec<(String, RobustnessReport)>,
    pub ordering: Option<String>,
}

pub fn cmd_indicator(cfg: &Config, checkpoints: &[PathBuf]) -> Result<IndicatorOutcome> {
    let mut run = Run::new(cfg)?;
    let out = indicator_in(&mut run, checkpoints)?;
    run.finish("indicator")?;
    Ok(out)
}

fn indicator_in(run: &mut Run, checkpoints: &[PathBuf]) -> Result<IndicatorOutcome> {
    let cfg = run.cfg;
    let ic = &cfg.indicator;
    let (_, test) = load_data_into(cfg, &mut run.inputs)?;
    if !ic.spectral && test.shape.len() > ic.hessian_cap {
        return Err(Error::validation(
            "indicator",
            format!(
                "input dimension {} exceeds the dense Hessian cap {}; set indicator.spectral=true for the top-k spectrum",
                test.shape.len(),
                ic.hessian_cap
            ),
        ));
    }
    let rc = ReportConfig {
        sample_count: ic.samples,
        seed: cfg.run.seed,
        epsilon: ic.epsilon,
        hessian_cap: if ic.spectral { 0 } else { ic.hessian_cap },
        top_k: ic.top_k,
    };
    let mut reports = Vec::new();
    for (path, label) in checkpoints.iter().zip(checkpoint_labels(checkpoints)) {
        let net = load_checkpoint(run, path, &test)?;
        let report = indicator::build_report(&net, &test, &rc)?;
        run.write(&format!("indicator/{label}/report.txt"), report.to_text().as_bytes())?;
        if ic.images {
            for r in &report.samples {
                run.write(&format!("indicator/{label}/jacobian_{}.pgm", r.index), &indicator::jacobian_pgm(&r.jacobian, report.shape)?)?;
            }
        }
        reports.push((label, report));
    }
    let ordering = match reports.as_slice() {
        [(a, ra), (b, rb)] => Some(ordering_summary(a, ra, b, rb)),
        _ => None,
    };
    if let Some(text) = &ordering {
        run.write("indicator/ordering.txt", text.as_bytes())?;
    }
    Ok(IndicatorOutcome { reports, ordering })
}

/// Side-by-side means of two reports, reading the first as the natural model
/// and the second as the robust one.
pub fn ordering_summary(natural: &str, a: &RobustnessReport, robust: &str, b: &RobustnessReport) -> String {
    let (x, y) = (&a.aggregate, &b.aggregate);
    let mut s = format!("statistic\t{natural}\t{robust}\tratio\texpected\tholds\n");
    let mut row = |name: &str, u: f64, v: f64, natural_larger: bool| {
        let holds = if natural_larger { u > v } else { v > u };
        let _ = writeln!(
            s,
            "{name}\t{u:.6e}\t{v:.6e}\t{}\t{}\t{}",
            if v != 0.0 { format!("{:.4}", u / v) } else { "-".to_string() },
            if natural_larger { "natural>robust" } else { "robust>natural" },
            if holds { "yes" } else { "no" }
        );
    };
    row("mean_jacobian_l1", x.jacobian_l1, y.jacobian_l1, true);
    row("mean_hessian_l1", x.hessian_l1, y.hessian_l1, true);
    row("mean_jacobian_zero_ratio", x.jacobian_zero_ratio, y.jacobian_zero_ratio, false);
    if let (Some(u), Some(v)) = (x.hessian_zero_ratio, y.hessian_zero_ratio) {
        row("mean_hessian_zero_ratio", u, v, false);
    }
    row("mean_margin", x.margin, y.margin, false);
    row("certified_fraction", x.certified_fraction, y.certified_fraction, false);
    s
}

pub struct EvalOutcome {
    pub trained: Option<TrainHistory>,
    pub table: AccuracyTable,
    pub indicator: IndicatorOutcome,
}

/// Trains `<out_dir>/model.ckpt` if no checkpoint is given and none exists,
/// then writes the attack table and the indicator reports.
pub fn cmd_eval(cfg: &Config, checkpoints: &[PathBuf]) -> Result<EvalOutcome> {
    let mut run = Run::new(cfg)?;
    let checkpoints = resolve_checkpoints(cfg, checkpoints);
    let default = cfg.run.out_dir.join("model.ckpt");
    let trained = if checkpoints == [default.clone()] && !default.exists() {
        Some(train_in(&mut run)?.1)
    } else {
        None
    };
    let table = attack_in(&mut run, &checkpoints)?;
    let indicator = indicator_in(&mut run, &checkpoints)?;
    run.finish("eval")?;
    Ok(EvalOutcome { trained, table, indicator })
}
