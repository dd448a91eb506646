//! Training loops: natural, Jacobian-regularized (double backpropagation),
//! cross-entropy-gradient regularized, adversarial augmentation and min-max.
//!
//! The Jacobian-regularized objective for one sample is
//!
//! ```text
//! loss = CE(Z(x), t) + c * norm(dL/dx)
//! ```
//!
//! where `L` is the decision margin. Its parameter gradient contains the
//! mixed second derivative `d norm(dL/dx) / d theta`, which is obtained by
//! differentiating the recorded backward pass. Updates are plain SGD on the
//! batch mean.
//!
//! The penalized gradient is that of the batch-mean margin with respect to the
//! batch of inputs, so each sample contributes `J / B` for batch size `B`.
//! `l1` and `l2` average over the entries of that tensor (mean `|J_i| / B`,
//! mean `(J_i / B)^2`); `linf` takes the maximum per sample and averages over
//! the batch.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::info;

use crate::attacks::{self, AttackMethod, AttackSpec, Objective};
use crate::autodiff::{Graph, Var};
use crate::data::{self, Dataset, Sample};
use crate::decision::{self, cross_entropy_node, margin_node};
use crate::error::{Error, Result};
use crate::nn::{Network, ParamVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Natural,
    /// Penalize the input gradient of the decision margin.
    JacobianReg,
    /// Penalize the input gradient of the cross-entropy instead.
    CeGradReg,
    /// Augment each batch with attack examples from the current model.
    AdvTrain,
    /// Replace each batch by its BIM perturbations.
    MinMax,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Natural => "natural",
            TrainMode::JacobianReg => "jacobian_reg",
            TrainMode::CeGradReg => "ce_grad_reg",
            TrainMode::AdvTrain => "adv_train",
            TrainMode::MinMax => "minmax",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "natural" => TrainMode::Natural,
            "jacobian_reg" => TrainMode::JacobianReg,
            "ce_grad_reg" => TrainMode::CeGradReg,
            "adv_train" => TrainMode::AdvTrain,
            "minmax" => TrainMode::MinMax,
            _ => {
                return Err(Error::validation(
                    "training mode",
                    format!("unknown mode `{s}` (natural, jacobian_reg, ce_grad_reg, adv_train, minmax)"),
                ))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    L1,
    L2,
    Linf,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::L1 => "l1",
            NormKind::L2 => "l2",
            NormKind::Linf => "linf",
        }
    }

    /// Host-side value of the norm, matching [`norm_node`].
    pub fn apply(self, v: &[f64]) -> f64 {
        let n = v.len().max(1) as f64;
        match self {
            NormKind::L1 => v.iter().map(|x| x.abs()).sum::<f64>() / n,
            NormKind::L2 => v.iter().map(|x| x * x).sum::<f64>() / n,
            NormKind::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

impl FromStr for NormKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(NormKind::L1),
            "l2" => Ok(NormKind::L2),
            "linf" => Ok(NormKind::Linf),
            _ => Err(Error::validation("norm", format!("unknown norm `{s}` (l1, l2, linf)"))),
        }
    }
}

/// Records the penalty norm of a gradient node.
pub fn norm_node(g: &mut Graph, v: Var, kind: NormKind) -> Result<Var> {
    let n = g.value(v).len().max(1) as f64;
    match kind {
        NormKind::L1 => {
            let a = g.abs(v);
            let s = g.sum(a);
            Ok(g.scale(s, 1.0 / n))
        }
        NormKind::L2 => {
            let s = g.dot(v, v)?;
            Ok(g.scale(s, 1.0 / n))
        }
        NormKind::Linf => {
            let a = g.abs(v);
            let vals = g.value(a);
            let mut arg = 0;
            for (i, &x) in vals.iter().enumerate() {
                if x > vals[arg] {
                    arg = i;
                }
            }
            g.gather(a, vec![arg])
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    /// Step decay: the rate is multiplied by `lr_decay` every
    /// `lr_decay_every` epochs. `lr_decay_every = 0` keeps it constant.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Penalty strength `c`; only used by the regularized modes.
    pub penalty: f64,
    pub norm: NormKind,
    /// Attack used to build examples for `adv_train`; `minmax` uses its
    /// budget, step and iteration count with BIM on the cross-entropy.
    pub attack: AttackSpec,
    /// Fraction of each batch that gets an adversarial copy in `adv_train`.
    pub adv_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Natural,
            learning_rate: 0.05,
            lr_decay: 1.0,
            lr_decay_every: 0,
            epochs: 30,
            batch_size: 64,
            penalty: 500.0,
            norm: NormKind::L1,
            attack: AttackSpec::cw_pgd(0.3, 0.1, 10),
            adv_ratio: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty >= 0.0) {
            return Err(Error::validation("training config", "penalty must be >= 0"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::validation("training config", "learning rate must be finite and >= 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::validation("training config", "lr_decay must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("training config", "batch size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.adv_ratio) {
            return Err(Error::validation("training config", "adv_ratio must lie in [0, 1]"));
        }
        self.attack.resolved()?;
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            0 => self.learning_rate,
            k => self.learning_rate * self.lr_decay.powi((epoch / k) as i32),
        }
    }

    fn regularized(&self) -> bool {
        matches!(self.mode, TrainMode::JacobianReg | TrainMode::CeGradReg) && self.penalty != 0.0
    }

    fn minmax_attack(&self) -> AttackSpec {
        AttackSpec {
            method: AttackMethod::Bim,
            objective: Objective::NontargetedCe,
            ..self.attack
        }
    }
}

/// Batch means of the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub regularizer: f64,
}

struct SampleGrad {
    grad: Vec<f64>,
    cross_entropy: f64,
    regularizer: f64,
    correct: bool,
}

/// Which scalar's input gradient is penalized.
#[derive(Clone, Copy)]
enum PenaltyHead {
    Margin,
    CrossEntropy,
}

#[allow(clippy::too_many_arguments)]
fn record_penalty(g: &mut Graph, x: Var, logits: Var, ce: Var, label: usize, head: PenaltyHead, norm: NormKind, batch_len: usize) -> Result<Var> {
    let scalar = match head {
        PenaltyHead::Margin => margin_node(g, logits, label)?,
        PenaltyHead::CrossEntropy => ce,
    };
    let jx = g.grad(scalar, &[x])?[0];
    let share = g.scale(jx, 1.0 / batch_len as f64);
    norm_node(g, share, norm)
}

fn penalty_head(mode: TrainMode) -> Option<PenaltyHead> {
    match mode {
        TrainMode::JacobianReg => Some(PenaltyHead::Margin),
        TrainMode::CeGradReg => Some(PenaltyHead::CrossEntropy),
        _ => None,
    }
}

fn sample_gradient(net: &Network, sample: &Sample, cfg: &TrainConfig, batch_len: usize) -> Result<SampleGrad> {
    let mut g = Graph::new();
    let params: ParamVars = net.bind_params(&mut g, true);
    let regularized = cfg.regularized();
    let x = if regularized {
        g.leaf(sample.features.clone())
    } else {
        g.constant(sample.features.clone())
    };
    let logits = net.forward_graph(&mut g, &params, x)?;
    let correct = decision::margin(g.value(logits), sample.label)? > 0.0;
    let ce = cross_entropy_node(&mut g, logits, sample.label)?;
    let cross_entropy = g.scalar(ce);

    let (objective, regularizer) = match penalty_head(cfg.mode) {
        Some(head) if regularized => {
            let reg = record_penalty(&mut g, x, logits, ce, sample.label, head, cfg.norm, batch_len)?;
            let scaled = g.scale(reg, cfg.penalty);
            (g.add(ce, scaled)?, g.scalar(reg))
        }
        _ => (ce, 0.0),
    };
    let grads = g.gradient(objective, &params.all())?;
    Ok(SampleGrad {
        grad: ParamVars::flatten(&grads),
        cross_entropy,
        regularizer,
        correct,
    })
}

/// Batch-mean cross-entropy plus `c` times the batch-mean penalty for the
/// regularized modes; other modes report cross-entropy alone.
pub fn total_loss(net: &Network, batch: &[Sample], cfg: &TrainConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::validation("batch", "empty batch"));
    }
    let mut out = LossBreakdown::default();
    for s in batch {
        let logits = net.forward(&s.features)?;
        out.cross_entropy += decision::cross_entropy(&logits, s.label)?;
    }
    if let Some(head) = penalty_head(cfg.mode) {
        out.regularizer = batch_penalty(net, batch, head, cfg.norm)?;
    }
    out.cross_entropy /= batch.len() as f64;
    out.total = out.cross_entropy + cfg.penalty * out.regularizer;
    Ok(out)
}

fn batch_penalty(net: &Network, batch: &[Sample], head: PenaltyHead, norm: NormKind) -> Result<f64> {
    let mut sum = 0.0;
    for s in batch {
        let (_, _, jx) = match head {
            PenaltyHead::Margin => net.input_gradient(&s.features, |g, z| margin_node(g, z, s.label))?,
            PenaltyHead::CrossEntropy => net.input_gradient(&s.features, |g, z| cross_entropy_node(g, z, s.label))?,
        };
        let share: Vec<f64> = jx.iter().map(|v| v / batch.len() as f64).collect();
        sum += norm.apply(&share);
    }
    Ok(sum / batch.len() as f64)
}

/// The `jacobian_reg` regularizer of `batch`, computable for any model.
pub fn margin_jacobian_penalty(net: &Network, batch: &[Sample], norm: NormKind) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::validation("batch", "empty batch"));
    }
    batch_penalty(net, batch, PenaltyHead::Margin, norm)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub cross_entropy: f64,
    pub regularizer: f64,
    pub correct: usize,
    pub samples: usize,
}

/// One SGD update on the batch mean:
/// `theta -= lr * (dCE/dtheta + c * d norm(dL/dx) / dtheta)`.
pub fn sgd_step(net: &mut Network, batch: &[Sample], cfg: &TrainConfig) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::validation("batch", "empty batch"));
    }
    let mut acc = vec![0.0; net.params().len()];
    let mut stats = StepStats::default();
    for s in batch {
        let sg = sample_gradient(net, s, cfg, batch.len())?;
        for (a, v) in acc.iter_mut().zip(&sg.grad) {
            *a += v;
        }
        stats.cross_entropy += sg.cross_entropy;
        stats.regularizer += sg.regularizer;
        stats.correct += usize::from(sg.correct);
    }
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite parameter gradient".into()));
    }
    let scale = cfg.learning_rate / batch.len() as f64;
    for (p, gsum) in net.params_mut().iter_mut().zip(&acc) {
        *p -= scale * gsum;
    }
    stats.samples = batch.len();
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub cross_entropy: f64,
    pub regularizer: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// Wall time of the optimization steps (evaluation excluded).
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// Per-epoch losses and accuracies. Wall time is kept out so the table is
    /// reproducible; see [`TrainHistory::timing_table`].
    pub fn to_table(&self) -> String {
        let mut s = String::from("epoch\tcross_entropy\tregularizer\ttrain_accuracy\ttest_accuracy\n");
        for e in &self.epochs {
            let test = e.test_accuracy.map_or("-".to_string(), |a| format!("{a:.6}"));
            s.push_str(&format!(
                "{}\t{:.9e}\t{:.9e}\t{:.6}\t{}\n",
                e.epoch, e.cross_entropy, e.regularizer, e.train_accuracy, test
            ));
        }
        s
    }

    pub fn timing_table(&self) -> String {
        let mut s = String::from("epoch\tseconds\n");
        for e in &self.epochs {
            s.push_str(&format!("{}\t{:.3}\n", e.epoch, e.seconds));
        }
        s
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len().max(1) as f64
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Builds the batch actually optimized on, according to the mode.
fn effective_batch(net: &Network, batch: Vec<Sample>, cfg: &TrainConfig) -> Result<Vec<Sample>> {
    match cfg.mode {
        TrainMode::AdvTrain => {
            let k = (cfg.adv_ratio * batch.len() as f64).round() as usize;
            let mut out = batch;
            for i in 0..k {
                let s = &out[i];
                let r = attacks::run_attack(net, &s.features, s.label, &cfg.attack)?;
                out.push(Sample { features: r.perturbed, label: s.label });
            }
            Ok(out)
        }
        TrainMode::MinMax => {
            let spec = cfg.minmax_attack();
            batch
                .into_iter()
                .map(|s| {
                    let r = attacks::run_attack(net, &s.features, s.label, &spec)?;
                    Ok(Sample { features: r.perturbed, label: s.label })
                })
                .collect()
        }
        _ => Ok(batch),
    }
}

/// Trains a copy of `net`. `eval`, when given, is scored after every epoch,
/// and `on_epoch` sees the model after each epoch (e.g. to checkpoint it).
pub fn train_with<F>(net: &Network, ds: &Dataset, cfg: &TrainConfig, eval: Option<&Dataset>, mut on_epoch: F) -> Result<(Network, TrainHistory)>
where
    F: FnMut(&EpochStats, &Network) -> Result<()>,
{
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::validation("dataset", "cannot train on an empty dataset"));
    }
    let mut net = net.clone();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let step_cfg = TrainConfig { learning_rate: cfg.learning_rate_at(epoch), ..*cfg };
        let start = Instant::now();
        let mut ce = 0.0;
        let mut reg = 0.0;
        let mut correct = 0;
        let mut seen = 0;
        for idx in data::batches(ds.len(), cfg.batch_size, epoch_seed(cfg.seed, epoch))? {
            let batch: Vec<Sample> = idx.iter().map(|&i| ds.samples[i].clone()).collect();
            let batch = effective_batch(&net, batch, cfg)?;
            let st = sgd_step(&mut net, &batch, &step_cfg)
                .map_err(|e| Error::Numerical(format!("epoch {epoch}: {e}")))?;
            ce += st.cross_entropy;
            reg += st.regularizer;
            correct += st.correct;
            seen += st.samples;
        }
        let seconds = start.elapsed().as_secs_f64();
        let test_accuracy = eval.map(|d| attacks::natural_accuracy(&net, d)).transpose()?;
        let stats = EpochStats {
            epoch,
            cross_entropy: ce / seen as f64,
            regularizer: reg / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            test_accuracy,
            seconds,
        };
        info!(
            "{} epoch {epoch}: ce {:.4} reg {:.4} train acc {:.4} test acc {:?} ({seconds:.1}s)",
            cfg.mode, stats.cross_entropy, stats.regularizer, stats.train_accuracy, stats.test_accuracy
        );
        on_epoch(&stats, &net)?;
        history.epochs.push(stats);
    }
    Ok((net, history))
}

pub fn train(net: &Network, ds: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    train_with(net, ds, cfg, None, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec, NetworkSpec, Shape};

    /// Single-weight model `Z = (theta x, 0)`: margin `theta x`, dL/dx = theta.
    fn one_param(theta: f64) -> Network {
        let spec = NetworkSpec {
            input: Shape::flat(1),
            layers: vec![LayerSpec::Dense { units: 2, activation: Activation::Identity }],
            classes: 2,
        };
        Network::from_params(spec, 0, vec![theta, 0.0, 0.0, 0.0]).unwrap()
    }

    fn reg_cfg(c: f64, norm: NormKind) -> TrainConfig {
        TrainConfig { mode: TrainMode::JacobianReg, penalty: c, norm, ..TrainConfig::default() }
    }

    #[test]
    fn zero_penalty_is_plain_cross_entropy() {
        let ds = data::synth_blobs(3, 4, 5, 0.1, 2).unwrap();
        let net = Network::init(NetworkSpec::blobs_mlp(5, 3), 1).unwrap();
        let l = total_loss(&net, &ds.samples, &reg_cfg(0.0, NormKind::L1)).unwrap();
        assert_eq!(l.total, l.cross_entropy);
    }

    #[test]
    fn constant_network_has_zero_regularizer() {
        let spec = NetworkSpec::blobs_mlp(3, 2);
        let n = spec.param_count().unwrap();
        let net = Network::from_params(spec, 0, vec![0.0; n]).unwrap();
        let ds = data::synth_blobs(2, 3, 3, 0.1, 0).unwrap();
        assert_eq!(total_loss(&net, &ds.samples, &reg_cfg(10.0, NormKind::L1)).unwrap().regularizer, 0.0);
    }

    #[test]
    fn one_parameter_closed_form() {
        let theta = 0.7;
        let x = 0.5;
        let c = 3.0;
        let net = one_param(theta);
        let batch = vec![Sample { features: vec![x], label: 0 }];
        let l = total_loss(&net, &batch, &reg_cfg(c, NormKind::L2)).unwrap();
        let ce = (1.0 + (-theta * x).exp()).ln();
        assert!((l.cross_entropy - ce).abs() < 1e-15);
        assert!((l.total - (ce + c * theta * theta)).abs() < 1e-14);

        // d/dtheta [ln(1 + e^{-theta x}) + c theta^2] = -x sigma(-theta x) + 2 c theta
        let mut stepped = net.clone();
        let cfg = TrainConfig { learning_rate: 1.0, ..reg_cfg(c, NormKind::L2) };
        sgd_step(&mut stepped, &batch, &cfg).unwrap();
        let sig = 1.0 / (1.0 + (theta * x).exp());
        let expected = theta - (-x * sig + 2.0 * c * theta);
        assert!((stepped.params()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = data::synth_blobs(2, 5, 4, 0.1, 3).unwrap();
        let mut net = Network::init(NetworkSpec::blobs_mlp(4, 2), 9).unwrap();
        let before = net.params().to_vec();
        let cfg = TrainConfig { learning_rate: 0.0, ..reg_cfg(5.0, NormKind::L1) };
        sgd_step(&mut net, &ds.samples, &cfg).unwrap();
        assert_eq!(net.params(), before.as_slice());
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let ds = data::synth_blobs(2, 5, 4, 0.1, 3).unwrap();
        let net = Network::init(NetworkSpec::blobs_mlp(4, 2), 9).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (out, hist) = train(&net, &ds, &cfg).unwrap();
        assert_eq!(out, net);
        assert!(hist.epochs.is_empty());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = data::synth_blobs(2, 5, 4, 0.1, 3).unwrap().take(0);
        let net = Network::init(NetworkSpec::blobs_mlp(4, 2), 9).unwrap();
        assert!(matches!(train(&net, &ds, &TrainConfig::default()), Err(Error::Validation { .. })));
    }

    #[test]
    fn norms_match_host_values() {
        let v = vec![0.5, -2.0, 0.0, 1.5];
        for kind in [NormKind::L1, NormKind::L2, NormKind::Linf] {
            let mut g = Graph::new();
            let x = g.leaf(v.clone());
            let n = norm_node(&mut g, x, kind).unwrap();
            assert_eq!(g.scalar(n), kind.apply(&v));
        }
        assert_eq!(NormKind::Linf.apply(&v), 2.0);
    }

    #[test]
    fn mode_strings_parse() {
        for m in ["natural", "jacobian_reg", "ce_grad_reg", "adv_train", "minmax"] {
            assert_eq!(m.parse::<TrainMode>().unwrap().name(), m);
        }
        assert!("adversarial".parse::<TrainMode>().is_err());
    }
}
