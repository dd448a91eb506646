//! Gradient-sign attacks under an `l_inf` budget on the `[0, 1]` pixel range.
//!
//! Every objective is oriented so that a positive step along the returned
//! direction *decreases* the decision margin:
//!
//! * `NontargetedCe` ascends the cross-entropy of the true class,
//! * `LeastLikelyCe` descends the cross-entropy of the least-likely class,
//! * `CwMargin` ascends `max_{i != t} Z_i - Z_t`.
//!
//! Iterative methods project onto the `epsilon` ball and the pixel range after
//! every step. Inputs that are already misclassified (margin `<= 0`) count as
//! successful attacks with a zero perturbation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::Dataset;
use crate::decision::{self, cross_entropy_node, margin_node};
use crate::error::{Error, Result};
use crate::nn::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackMethod {
    Fgsm,
    Bim,
    CwPgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    NontargetedCe,
    LeastLikelyCe,
    CwMargin,
}

impl AttackMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Bim => "bim",
            AttackMethod::CwPgd => "cw_pgd",
        }
    }
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::NontargetedCe => "nontargeted_ce",
            Objective::LeastLikelyCe => "least_likely_ce",
            Objective::CwMargin => "cw_margin",
        }
    }
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "bim" => Ok(AttackMethod::Bim),
            "cw_pgd" | "cw" => Ok(AttackMethod::CwPgd),
            _ => Err(Error::validation("attack method", format!("unknown method `{s}` (fgsm, bim, cw_pgd)"))),
        }
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nontargeted_ce" => Ok(Objective::NontargetedCe),
            "least_likely_ce" => Ok(Objective::LeastLikelyCe),
            "cw_margin" => Ok(Objective::CwMargin),
            _ => Err(Error::validation(
                "attack objective",
                format!("unknown objective `{s}` (nontargeted_ce, least_likely_ce, cw_margin)"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackSpec {
    pub method: AttackMethod,
    pub objective: Objective,
    /// `l_inf` budget on the `[0, 1]` range.
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            method: AttackMethod::Fgsm,
            objective: Objective::NontargetedCe,
            epsilon,
            step_size: epsilon,
            iterations: 1,
        }
    }

    pub fn bim(epsilon: f64, step_size: f64, iterations: usize) -> Self {
        AttackSpec {
            method: AttackMethod::Bim,
            objective: Objective::NontargetedCe,
            epsilon,
            step_size,
            iterations,
        }
    }

    pub fn cw_pgd(epsilon: f64, step_size: f64, iterations: usize) -> Self {
        AttackSpec {
            method: AttackMethod::CwPgd,
            objective: Objective::CwMargin,
            epsilon,
            step_size,
            iterations,
        }
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    /// Checks the budget and returns the effective spec: FGSM is forced to a
    /// single step of size `epsilon`, and `cw_pgd` always uses the margin
    /// objective. A zero budget is allowed and leaves inputs untouched.
    pub fn resolved(&self) -> Result<AttackSpec> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::validation("attack", format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        let mut s = *self;
        match s.method {
            AttackMethod::Fgsm => {
                s.iterations = 1;
                s.step_size = s.epsilon;
            }
            AttackMethod::CwPgd => s.objective = Objective::CwMargin,
            AttackMethod::Bim => {}
        }
        if s.iterations == 0 {
            return Err(Error::validation("attack", "iterations must be at least 1"));
        }
        if !(s.step_size >= 0.0) || !s.step_size.is_finite() {
            return Err(Error::validation("attack", "step size must be finite and >= 0"));
        }
        Ok(s)
    }
}

/// Logits at `x` and the sign direction that lowers the margin.
fn logits_and_direction(net: &Network, x: &[f64], true_class: usize, objective: Objective) -> Result<(Vec<f64>, Vec<f64>)> {
    let (logits, _, grad) = match objective {
        Objective::NontargetedCe => net.input_gradient(x, |g, z| cross_entropy_node(g, z, true_class))?,
        Objective::LeastLikelyCe => net.input_gradient(x, |g, z| {
            let target = decision::least_likely(g.value(z));
            let ce = cross_entropy_node(g, z, target)?;
            Ok(g.scale(ce, -1.0))
        })?,
        Objective::CwMargin => net.input_gradient(x, |g, z| {
            let m = margin_node(g, z, true_class)?;
            Ok(g.scale(m, -1.0))
        })?,
    };
    let dir = grad
        .iter()
        .map(|&v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok((logits, dir))
}

/// Sign of the gradient of the chosen objective, oriented so that a positive
/// step lowers the margin. Entries are in `{-1, 0, 1}`.
pub fn attack_direction(net: &Network, x: &[f64], true_class: usize, objective: Objective) -> Result<Vec<f64>> {
    Ok(logits_and_direction(net, x, true_class, objective)?.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub point: Vec<f64>,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialResult {
    pub original: Vec<f64>,
    pub perturbed: Vec<f64>,
    pub delta: Vec<f64>,
    /// The perturbed input is not strictly correctly classified.
    pub success: bool,
    /// Starting point first, then one entry per step taken.
    pub trajectory: Vec<TrajectoryPoint>,
}

impl AdversarialResult {
    pub fn linf(&self) -> f64 {
        self.delta.iter().fold(0.0, |m, d| m.max(d.abs()))
    }

    pub fn final_margin(&self) -> f64 {
        self.trajectory.last().map_or(f64::NAN, |p| p.margin)
    }
}

pub fn run_attack(net: &Network, x: &[f64], true_class: usize, spec: &AttackSpec) -> Result<AdversarialResult> {
    let spec = spec.resolved()?;
    if x.len() != net.input_len() {
        return Err(Error::Shape(format!("input of length {}, network expects {}", x.len(), net.input_len())));
    }
    let lower: Vec<f64> = x.iter().map(|&v| (v - spec.epsilon).max(0.0)).collect();
    let upper: Vec<f64> = x.iter().map(|&v| (v + spec.epsilon).min(1.0)).collect();

    let mut current = x.to_vec();
    let (logits, mut dir) = logits_and_direction(net, &current, true_class, spec.objective)?;
    let start_margin = decision::margin(&logits, true_class)?;
    let mut trajectory = vec![TrajectoryPoint { point: current.clone(), margin: start_margin }];

    if start_margin > 0.0 && spec.epsilon > 0.0 {
        for k in 0..spec.iterations {
            if k > 0 {
                dir = logits_and_direction(net, &current, true_class, spec.objective)?.1;
            }
            for (i, c) in current.iter_mut().enumerate() {
                *c = (*c + spec.step_size * dir[i]).clamp(lower[i], upper[i]);
            }
            trajectory.push(TrajectoryPoint {
                point: current.clone(),
                margin: decision::margin(&net.forward(&current)?, true_class)?,
            });
        }
    }

    let final_margin = trajectory.last().expect("trajectory starts non-empty").margin;
    let delta = current.iter().zip(x).map(|(a, b)| a - b).collect();
    Ok(AdversarialResult {
        original: x.to_vec(),
        perturbed: current,
        delta,
        success: final_margin <= 0.0,
        trajectory,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackRecord {
    pub index: usize,
    pub success: bool,
    pub linf: f64,
    pub final_margin: f64,
}

/// Attacks every sample, in dataset order.
pub fn attack_dataset(net: &Network, ds: &Dataset, spec: &AttackSpec) -> Result<Vec<AttackRecord>> {
    ds.samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let r = run_attack(net, &s.features, s.label, spec)?;
            Ok(AttackRecord {
                index,
                success: r.success,
                linf: r.linf(),
                final_margin: r.final_margin(),
            })
        })
        .collect()
}

/// Fraction of samples whose margin stays strictly positive after the attack.
pub fn robust_accuracy(net: &Network, ds: &Dataset, spec: &AttackSpec) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::validation("dataset", "robust accuracy of an empty dataset"));
    }
    let records = attack_dataset(net, ds, spec)?;
    Ok(records.iter().filter(|r| !r.success).count() as f64 / records.len() as f64)
}

/// Fraction of samples with strictly positive margin.
pub fn natural_accuracy(net: &Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::validation("dataset", "accuracy of an empty dataset"));
    }
    let mut correct = 0;
    for s in &ds.samples {
        if decision::margin(&net.forward(&s.features)?, s.label)? > 0.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub fn attack_table(records: &[AttackRecord]) -> String {
    let mut s = String::from("index\tsuccess\tlinf\tfinal_margin\n");
    for r in records {
        s.push_str(&format!("{}\t{}\t{:.9e}\t{:.9e}\n", r.index, u8::from(r.success), r.linf, r.final_margin));
    }
    s
}

pub fn write_attack_table(records: &[AttackRecord], path: &Path) -> Result<()> {
    fs::write(path, attack_table(records)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec, NetworkSpec, Shape};

    /// Z = W x with two classes and no bias.
    fn linear(w0: &[f64], w1: &[f64]) -> Network {
        let spec = NetworkSpec {
            input: Shape::flat(w0.len()),
            layers: vec![LayerSpec::Dense { units: 2, activation: Activation::Identity }],
            classes: 2,
        };
        let mut p = w0.to_vec();
        p.extend(w1);
        p.extend([0.0, 0.0]);
        Network::from_params(spec, 0, p).unwrap()
    }

    #[test]
    fn linear_direction_is_sign_of_rival_minus_true() {
        let net = linear(&[0.5, -1.0, 0.2], &[-0.3, 0.4, 0.6]);
        let x = [0.5, 0.5, 0.5];
        for obj in [Objective::NontargetedCe, Objective::CwMargin] {
            assert_eq!(attack_direction(&net, &x, 0, obj).unwrap(), vec![-1.0, 1.0, 1.0]);
        }
        // Least-likely target is class 1 here, same direction.
        assert_eq!(attack_direction(&net, &[0.9, 0.1, 0.5], 0, Objective::LeastLikelyCe).unwrap(), vec![-1.0, 1.0, 1.0]);
        // The margin gradient is exact, so a tied weight gives a zero entry.
        let tied = linear(&[0.5, -1.0, 0.2], &[-0.3, 0.4, 0.2]);
        assert_eq!(attack_direction(&tied, &x, 0, Objective::CwMargin).unwrap(), vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn constant_network_has_zero_direction() {
        let net = linear(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(attack_direction(&net, &[0.3, 0.6], 1, Objective::CwMargin).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn fgsm_threshold_on_one_dimensional_linear_model() {
        // Z0 = w x, Z1 = -w x: margin 2 w x, flipped once eps > margin / (2 w).
        let w = 2.0;
        let net = linear(&[w], &[-w]);
        let x = [0.4];
        let m = 2.0 * w * x[0];
        let threshold = m / (2.0 * w);
        assert!(!run_attack(&net, &x, 0, &AttackSpec::fgsm(threshold - 1e-6)).unwrap().success);
        assert!(run_attack(&net, &x, 0, &AttackSpec::fgsm(threshold + 1e-6)).unwrap().success);
    }

    #[test]
    fn zero_budget_leaves_input_alone() {
        let net = linear(&[1.0, 0.0], &[0.0, 1.0]);
        let ok = run_attack(&net, &[0.8, 0.2], 0, &AttackSpec::fgsm(0.0)).unwrap();
        assert!(!ok.success && ok.delta == vec![0.0, 0.0]);
        let wrong = run_attack(&net, &[0.2, 0.8], 0, &AttackSpec::bim(0.0, 0.1, 5)).unwrap();
        assert!(wrong.success && wrong.delta == vec![0.0, 0.0]);
    }

    #[test]
    fn misclassified_inputs_count_as_success_without_moving() {
        let net = linear(&[1.0, 0.0], &[0.0, 1.0]);
        let r = run_attack(&net, &[0.2, 0.8], 0, &AttackSpec::bim(0.3, 0.1, 10)).unwrap();
        assert!(r.success);
        assert_eq!(r.linf(), 0.0);
        assert_eq!(r.trajectory.len(), 1);
    }

    #[test]
    fn bim_single_step_equals_fgsm() {
        let net = linear(&[0.7, -0.2, 0.1], &[0.1, 0.3, -0.4]);
        let x = [0.6, 0.3, 0.9];
        let a = run_attack(&net, &x, 0, &AttackSpec::fgsm(0.05)).unwrap();
        let b = run_attack(&net, &x, 0, &AttackSpec::bim(0.05, 0.05, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(AttackSpec::bim(0.1, 0.01, 0).resolved().is_err());
        assert!(AttackSpec::fgsm(-0.1).resolved().is_err());
        assert_eq!(AttackSpec::cw_pgd(0.1, 0.01, 3).with_objective(Objective::NontargetedCe).resolved().unwrap().objective, Objective::CwMargin);
    }

    #[test]
    fn table_has_one_row_per_record() {
        let rows = vec![
            AttackRecord { index: 0, success: true, linf: 0.1, final_margin: -0.5 },
            AttackRecord { index: 1, success: false, linf: 0.1, final_margin: 2.0 },
        ];
        let t = attack_table(&rows);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(1).unwrap().starts_with("0\t1\t"));
    }
}
