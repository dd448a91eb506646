//! Run configuration: a TOML file with one section per pipeline stage, plus
//! `section.key=value` overrides from the command line.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Errors name the offending key path (`train.mode`, `attack.epsilons[1]`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackMethod, AttackSpec, Objective};
use crate::error::{Error, Result};
use crate::surface::{BetaSource, Space};
use crate::training::{NormKind, TrainConfig, TrainMode};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub surface: SurfaceSection,
    pub indicator: IndicatorSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Seeds initialization, batching, planes and sampling.
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, out_dir: PathBuf::from("runs/default") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `mnist` (IDX files under `mnist_dir`) or `blobs`.
    pub source: String,
    pub mnist_dir: PathBuf,
    /// Keep only the first N samples; 0 keeps all.
    pub train_limit: usize,
    pub test_limit: usize,
    pub blobs_classes: usize,
    pub blobs_dim: usize,
    pub blobs_train_per_class: usize,
    pub blobs_test_per_class: usize,
    pub blobs_spread: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "mnist".into(),
            mnist_dir: PathBuf::from("data/mnist"),
            train_limit: 0,
            test_limit: 0,
            blobs_classes: 3,
            blobs_dim: 2,
            blobs_train_per_class: 100,
            blobs_test_per_class: 50,
            blobs_spread: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `mnist-conv`, `mnist-mlp` or `blobs-mlp`.
    pub preset: String,
    /// Checkpoint used by `attack`, `surface` and `indicator` when no
    /// `--checkpoint` flag is given. Empty means `<out_dir>/model.ckpt`.
    pub checkpoint: PathBuf,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { preset: "mnist-conv".into(), checkpoint: PathBuf::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: String,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// 0 keeps the learning rate constant.
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub penalty: f64,
    pub norm: String,
    pub adv_ratio: f64,
    pub attack_method: String,
    pub attack_objective: String,
    pub attack_epsilon: f64,
    pub attack_step: f64,
    pub attack_iterations: usize,
    /// Write `checkpoints/epoch_NNN.ckpt` every N epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            mode: t.mode.name().into(),
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            lr_decay_every: t.lr_decay_every,
            epochs: t.epochs,
            batch_size: t.batch_size,
            penalty: t.penalty,
            norm: t.norm.name().into(),
            adv_ratio: t.adv_ratio,
            attack_method: t.attack.method.name().into(),
            attack_objective: t.attack.objective.name().into(),
            attack_epsilon: t.attack.epsilon,
            attack_step: t.attack.step_size,
            attack_iterations: t.attack.iterations,
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub methods: Vec<String>,
    pub epsilons: Vec<f64>,
    /// Step of the iterative methods.
    pub step_size: f64,
    pub iterations: usize,
    /// Objective of `fgsm` and `bim`; `cw_pgd` always uses the margin.
    pub objective: String,
    /// Attack only the first N test samples; 0 attacks all.
    pub limit: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            methods: vec!["fgsm".into(), "bim".into(), "cw_pgd".into()],
            epsilons: vec![0.1, 0.2, 0.3],
            step_size: 0.1,
            iterations: 10,
            objective: Objective::NontargetedCe.name().into(),
            limit: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceSection {
    pub space: String,
    /// `random`, `attack` or `attack:<objective>`.
    pub beta: String,
    /// `cross_entropy`, `decision_margin` or `both`.
    pub function: String,
    /// Index into the test split.
    pub sample: usize,
    pub i_range: usize,
    pub j_range: usize,
    /// Lattice spacing. Input-space directions have unit l2 norm, so on MNIST
    /// 20 steps of 0.25 reach an l_inf distance near 0.18 along a sign direction.
    pub step: f64,
    pub boundary: bool,
}

impl Default for SurfaceSection {
    fn default() -> Self {
        SurfaceSection {
            space: "input".into(),
            beta: "attack".into(),
            function: "both".into(),
            sample: 0,
            i_range: 20,
            j_range: 20,
            step: 0.25,
            boundary: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicatorSection {
    pub samples: usize,
    pub epsilon: f64,
    pub hessian_cap: usize,
    /// Use the top-k spectrum from Hessian-vector products instead of the
    /// dense Hessian. Required when the input dimension exceeds `hessian_cap`.
    pub spectral: bool,
    pub top_k: usize,
    pub images: bool,
}

impl Default for IndicatorSection {
    fn default() -> Self {
        IndicatorSection { samples: 100, epsilon: 0.1, hessian_cap: crate::indicator::DEFAULT_HESSIAN_CAP, spectral: false, top_k: 10, images: true }
    }
}

fn config_error(key: &str, reason: impl ToString) -> Error {
    Error::Config { key: key.to_string(), reason: reason.to_string() }
}

fn parse_at<T: std::str::FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: Error| match e {
        Error::Validation { reason, .. } => config_error(key, reason),
        other => config_error(key, other),
    })
}

/// Parses the right-hand side of an override as a TOML value, falling back to
/// a bare string (`train.mode=natural`).
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl Config {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| config_error("<file>", e.message()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| config_error(ov, "override must look like section.key=value"))?;
            let key = key.trim();
            let mut parts: Vec<&str> = key.split('.').collect();
            let leaf = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| config_error(key, "empty key"))?;
            let mut cur = &mut table;
            for p in parts {
                cur = cur
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| config_error(key, format!("`{p}` is not a section")))?;
            }
            cur.insert(leaf.to_string(), override_value(raw.trim()));
        }
        let cfg: Config = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if given) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides).map_err(|e| match (e, path) {
            (Error::Config { key, reason }, Some(p)) if key == "<file>" => config_error(&p.display().to_string(), reason),
            (e, _) => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Resolves every enumerated field so that mistakes surface before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.train_config()?;
        self.attack_specs()?;
        self.beta_source()?;
        self.space()?;
        self.surface_functions()?;
        match self.data.source.as_str() {
            "mnist" | "blobs" => {}
            other => return Err(config_error("data.source", format!("unknown source `{other}` (mnist, blobs)"))),
        }
        if !(self.surface.step > 0.0) {
            return Err(config_error("surface.step", "must be positive"));
        }
        if !(self.indicator.epsilon >= 0.0) {
            return Err(config_error("indicator.epsilon", "must be >= 0"));
        }
        if self.indicator.samples == 0 {
            return Err(config_error("indicator.samples", "must be at least 1"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let attack = AttackSpec {
            method: parse_at::<AttackMethod>("train.attack_method", &t.attack_method)?,
            objective: parse_at("train.attack_objective", &t.attack_objective)?,
            epsilon: t.attack_epsilon,
            step_size: t.attack_step,
            iterations: t.attack_iterations,
        };
        attack.resolved().map_err(|e| config_error("train.attack_epsilon", e))?;
        let cfg = TrainConfig {
            mode: parse_at::<TrainMode>("train.mode", &t.mode)?,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            lr_decay_every: t.lr_decay_every,
            epochs: t.epochs,
            batch_size: t.batch_size,
            penalty: t.penalty,
            norm: parse_at::<NormKind>("train.norm", &t.norm)?,
            attack,
            adv_ratio: t.adv_ratio,
            seed: self.run.seed,
        };
        cfg.validate().map_err(|e| config_error("train", e))?;
        Ok(cfg)
    }

    /// One spec per (method, epsilon), methods outermost.
    pub fn attack_specs(&self) -> Result<Vec<AttackSpec>> {
        let a = &self.attack;
        let objective: Objective = parse_at("attack.objective", &a.objective)?;
        let mut out = Vec::new();
        for (m, name) in a.methods.iter().enumerate() {
            let method: AttackMethod = parse_at(&format!("attack.methods[{m}]"), name)?;
            for (k, &eps) in a.epsilons.iter().enumerate() {
                let spec = match method {
                    AttackMethod::Fgsm => AttackSpec::fgsm(eps).with_objective(objective),
                    AttackMethod::Bim => AttackSpec::bim(eps, a.step_size, a.iterations).with_objective(objective),
                    AttackMethod::CwPgd => AttackSpec::cw_pgd(eps, a.step_size, a.iterations),
                };
                spec.resolved().map_err(|e| config_error(&format!("attack.epsilons[{k}]"), e))?;
                out.push(spec);
            }
        }
        Ok(out)
    }

    pub fn space(&self) -> Result<Space> {
        parse_at("surface.space", &self.surface.space)
    }

    pub fn beta_source(&self) -> Result<BetaSource> {
        let beta: BetaSource = parse_at("surface.beta", &self.surface.beta)?;
        if matches!(beta, BetaSource::Attack(_)) && self.space()? == Space::Parameter {
            return Err(config_error("surface.beta", "attack directions exist only in input space"));
        }
        Ok(beta)
    }

    pub fn surface_functions(&self) -> Result<Vec<crate::surface::SurfaceFunction>> {
        use crate::surface::SurfaceFunction;
        match self.surface.function.as_str() {
            "both" => Ok(vec![SurfaceFunction::CrossEntropy, SurfaceFunction::DecisionMargin]),
            f => Ok(vec![parse_at("surface.function", f)?]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml_str("", &[]).unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.train_config().unwrap(), TrainConfig::default());
        assert_eq!(c.attack_specs().unwrap().len(), 9);
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = Config::from_toml_str(
            "[train]\nepochs = 3\n",
            &["train.epochs=7".into(), "train.mode=jacobian_reg".into(), "attack.epsilons=[0.0, 0.1]".into()],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train_config().unwrap().mode, TrainMode::JacobianReg);
        assert_eq!(c.attack.epsilons, vec![0.0, 0.1]);
    }

    #[test]
    fn errors_name_the_key() {
        let key = |text: &str, ov: &[&str]| match Config::from_toml_str(text, &ov.iter().map(|s| s.to_string()).collect::<Vec<_>>()) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(key("[train]\nmode = \"sgd\"\n", &[]), "train.mode");
        assert_eq!(key("[train]\nepochs = \"many\"\n", &[]), "train.epochs");
        assert_eq!(key("[train]\nepoch = 3\n", &[]), "train.epoch");
        assert_eq!(key("", &["attack.methods=[\"fgsm\", \"pgd\"]"]), "attack.methods[1]");
        assert_eq!(key("", &["surface.space=parameter"]), "surface.beta");
        assert_eq!(key("", &["nonsense"]), "nonsense");
    }

    #[test]
    fn round_trips_through_toml() {
        let c = Config::from_toml_str("", &["run.seed=9".into(), "surface.function=decision_margin".into()]).unwrap();
        assert_eq!(Config::from_toml_str(&c.to_toml_string(), &[]).unwrap(), c);
    }
}
