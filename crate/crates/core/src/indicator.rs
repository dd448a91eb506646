//! Robustness indicator: input Jacobian and Hessian of the decision margin,
//! their spectra, and the second-order bound on the margin change.
//!
//! For a perturbation `delta` with `y = E^T delta` (`H = E diag(lambda) E^T`):
//!
//! ```text
//! |J.delta + 1/2 delta^T H delta| <= sum |J_i||delta_i| + 1/2 sum |lambda_i| y_i^2
//! ```
//!
//! Over the l-infinity ball of radius `eps` in `n` dimensions the right side
//! is at most `eps * |J|_1 + 1/2 * n * eps^2 * max |lambda_i|`, because
//! `|y|_2 = |delta|_2 <= eps * sqrt(n)`. A sample whose margin exceeds this
//! value is reported as certified to second order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attacks::{attack_direction, Objective};
use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::decision::{self, margin_node};
use crate::error::{Error, Result};
use crate::nn::{Network, Shape};

/// Jacobian entries below this magnitude count as zero.
pub const JACOBIAN_ZERO: f64 = 1e-3;
/// Hessian eigenvalues below this magnitude count as zero.
pub const HESSIAN_ZERO: f64 = 1e-10;
/// Largest input dimension for which the dense Hessian is assembled.
pub const DEFAULT_HESSIAN_CAP: usize = 1024;

/// `dL/dx` with the rival logit fixed at `x`.
pub fn input_jacobian(net: &Network, x: &[f64], true_class: usize) -> Result<Vec<f64>> {
    Ok(net.input_gradient(x, |g, z| margin_node(g, z, true_class))?.2)
}

/// Records the margin and its input gradient; returns the graph with
/// `(x, gradient)` nodes.
fn gradient_graph(net: &Network, x: &[f64], true_class: usize) -> Result<(Graph, crate::autodiff::Var, crate::autodiff::Var)> {
    let mut g = Graph::new();
    let p = net.bind_params(&mut g, false);
    let xv = g.leaf(x.to_vec());
    let z = net.forward_graph(&mut g, &p, xv)?;
    let m = margin_node(&mut g, z, true_class)?;
    let gx = g.grad(m, &[xv])?[0];
    Ok((g, xv, gx))
}

/// Dense input Hessian of the margin, one Hessian-vector product per column,
/// symmetrized as `(H + H^T) / 2`.
pub fn input_hessian(net: &Network, x: &[f64], true_class: usize, cap: usize) -> Result<DMatrix<f64>> {
    let n = x.len();
    if n > cap {
        return Err(Error::validation(
            "input hessian",
            format!("dimension {n} exceeds the dense cap {cap}; use the top-k spectrum from Hessian-vector products instead"),
        ));
    }
    let (mut g, xv, gx) = gradient_graph(net, x, true_class)?;
    let mut h = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for k in 0..n {
        e[k] = 1.0;
        let col = g.hvp_from_gradient(gx, xv, &e)?;
        e[k] = 0.0;
        h.column_mut(k).copy_from_slice(&col);
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Hessian-vector products `v -> H v` at one point, reusing a single
/// recorded gradient graph.
pub struct HessianOperator {
    graph: Graph,
    x: crate::autodiff::Var,
    gx: crate::autodiff::Var,
}

impl HessianOperator {
    pub fn new(net: &Network, x: &[f64], true_class: usize) -> Result<Self> {
        let (graph, x, gx) = gradient_graph(net, x, true_class)?;
        Ok(HessianOperator { graph, x, gx })
    }

    pub fn dim(&self) -> usize {
        self.graph.value(self.x).len()
    }

    pub fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        self.graph.hvp_from_gradient(self.gx, self.x, v)
    }
}

/// Eigenvalues sorted by decreasing magnitude with eigenvectors as the
/// matching columns of `vectors`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDecomposition {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
    /// False when only the leading eigenpairs were computed.
    pub complete: bool,
}

impl SpectralDecomposition {
    fn sorted(values: Vec<f64>, vectors: DMatrix<f64>, complete: bool) -> Self {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(values[b].total_cmp(&values[a])));
        let sorted_values = order.iter().map(|&i| values[i]).collect();
        let sorted_vectors = DMatrix::from_fn(vectors.nrows(), order.len(), |r, c| vectors[(r, order[c])]);
        SpectralDecomposition { values: sorted_values, vectors: sorted_vectors, complete }
    }

    /// `y = E^T delta`.
    pub fn project(&self, delta: &[f64]) -> Vec<f64> {
        (self.vectors.transpose() * DVector::from_column_slice(delta)).as_slice().to_vec()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&DVector::from_column_slice(&self.values)) * self.vectors.transpose()
    }
}

/// Full spectrum of a symmetric matrix.
pub fn eig_sym(h: &DMatrix<f64>) -> Result<SpectralDecomposition> {
    if !h.is_square() {
        return Err(Error::Shape(format!("eigendecomposition needs a square matrix, got {}x{}", h.nrows(), h.ncols())));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::try_new(h.clone(), f64::EPSILON, 100 * h.nrows().max(1))
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    Ok(SpectralDecomposition::sorted(eig.eigenvalues.as_slice().to_vec(), eig.eigenvectors, true))
}

/// Leading `k` eigenpairs (by magnitude) of a symmetric operator by power
/// iteration with deflation against the pairs already found.
pub fn top_eigenpairs<F>(mut apply: F, dim: usize, k: usize, iterations: usize, tol: f64, seed: u64) -> Result<SpectralDecomposition>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let k = k.min(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f64> = Vec::with_capacity(k);
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    let deflated = |apply: &mut F, v: &[f64], values: &[f64], vectors: &[Vec<f64>]| -> Result<Vec<f64>> {
        let mut w = apply(v)?;
        for (l, e) in values.iter().zip(vectors) {
            let c = l * dot(e, v);
            w.iter_mut().zip(e).for_each(|(a, b)| *a -= c * b);
        }
        Ok(w)
    };
    for _ in 0..k {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for e in &vectors {
            let c = dot(e, &v);
            v.iter_mut().zip(e).for_each(|(a, b)| *a -= c * b);
        }
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..iterations {
            let mut w = deflated(&mut apply, &v, &values, &vectors)?;
            let next = dot(&v, &w);
            let n = normalize(&mut w);
            if n == 0.0 {
                lambda = 0.0;
                break;
            }
            let done = (next - lambda).abs() <= tol * next.abs().max(1e-300);
            lambda = next;
            v = w;
            if done {
                break;
            }
        }
        values.push(lambda);
        vectors.push(v);
    }
    let m = DMatrix::from_fn(dim, vectors.len(), |r, c| vectors[c][r]);
    Ok(SpectralDecomposition::sorted(values, m, k == dim))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Both sides of `delta^T H delta = y^T diag(lambda) y`.
pub fn quadratic_form_identity_check(h: &DMatrix<f64>, spectrum: &SpectralDecomposition, delta: &[f64]) -> (f64, f64) {
    let d = DVector::from_column_slice(delta);
    let lhs = d.dot(&(h * &d));
    let y = spectrum.project(delta);
    let rhs = spectrum.values.iter().zip(&y).map(|(l, yi)| l * yi * yi).sum();
    (lhs, rhs)
}

/// `(|J.delta + 1/2 y^T diag(lambda) y|, sum |J_i||delta_i| + 1/2 sum |lambda_i| y_i^2)`.
///
/// Both sides are summed in the same order, so the inequality also holds
/// after rounding.
pub fn eq10_bound(j: &[f64], spectrum: &SpectralDecomposition, delta: &[f64]) -> (f64, f64) {
    let y = spectrum.project(delta);
    let (mut lin, mut lin_abs) = (0.0, 0.0);
    for (a, b) in j.iter().zip(delta) {
        lin += a * b;
        lin_abs += (a * b).abs();
    }
    let (mut quad, mut quad_abs) = (0.0, 0.0);
    for (l, yi) in spectrum.values.iter().zip(&y) {
        quad += l * (yi * yi);
        quad_abs += l.abs() * (yi * yi);
    }
    ((lin + 0.5 * quad).abs(), lin_abs + 0.5 * quad_abs)
}

/// `eps * |J|_1 + 1/2 * n * eps^2 * max |lambda_i|` with `n = J.len()`.
pub fn worst_case_bound(j: &[f64], eigenvalues: &[f64], epsilon: f64) -> f64 {
    let l1: f64 = j.iter().map(|v| v.abs()).sum();
    let top = eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    epsilon * l1 + 0.5 * j.len() as f64 * epsilon * epsilon * top
}

fn zero_ratio(v: &[f64], threshold: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().filter(|x| x.abs() < threshold).count() as f64 / v.len() as f64
}

/// `(jacobian_zero_ratio, hessian_zero_ratio)`.
pub fn sparsity_stats(j: &[f64], eigenvalues: &[f64]) -> (f64, f64) {
    (zero_ratio(j, JACOBIAN_ZERO), zero_ratio(eigenvalues, HESSIAN_ZERO))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportConfig {
    pub sample_count: usize,
    pub seed: u64,
    /// l-infinity radius for both bounds.
    pub epsilon: f64,
    pub hessian_cap: usize,
    /// Eigenpairs computed when the input dimension exceeds the cap.
    pub top_k: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { sample_count: 100, seed: 0, epsilon: 0.1, hessian_cap: DEFAULT_HESSIAN_CAP, top_k: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleReport {
    pub index: usize,
    pub true_class: usize,
    pub predicted: usize,
    pub margin: f64,
    pub jacobian: Vec<f64>,
    pub jacobian_l1: f64,
    pub jacobian_zero_ratio: f64,
    /// `sum |lambda_i|` over the computed eigenvalues.
    pub hessian_l1: f64,
    pub hessian_max: f64,
    /// `None` when only the top-k spectrum is known.
    pub hessian_zero_ratio: Option<f64>,
    /// `|J.delta + 1/2 delta^T H delta|` for the margin-attack step `delta`.
    pub exact_term: f64,
    pub bound_given_delta: f64,
    pub worst_case_bound: f64,
    /// `worst_case_bound < margin`.
    pub certified: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportAggregate {
    pub samples: usize,
    pub margin: f64,
    pub jacobian_l1: f64,
    pub jacobian_zero_ratio: f64,
    pub hessian_l1: f64,
    pub hessian_max: f64,
    pub hessian_zero_ratio: Option<f64>,
    pub exact_term: f64,
    pub bound_given_delta: f64,
    pub worst_case_bound: f64,
    pub certified_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub epsilon: f64,
    pub shape: Shape,
    pub samples: Vec<SampleReport>,
    pub aggregate: ReportAggregate,
}

/// Indicator fields of one input.
pub fn sample_report(net: &Network, x: &[f64], true_class: usize, cfg: &ReportConfig) -> Result<SampleReport> {
    let logits = net.forward(x)?;
    let margin = decision::margin(&logits, true_class)?;
    let jacobian = input_jacobian(net, x, true_class)?;
    let spectrum = if x.len() <= cfg.hessian_cap {
        eig_sym(&input_hessian(net, x, true_class, cfg.hessian_cap)?)?
    } else {
        let mut op = HessianOperator::new(net, x, true_class)?;
        top_eigenpairs(|v| op.apply(v), x.len(), cfg.top_k, 300, 1e-9, cfg.seed)?
    };
    let direction = attack_direction(net, x, true_class, Objective::CwMargin)?;
    let delta: Vec<f64> = x
        .iter()
        .zip(&direction)
        .map(|(xi, d)| (xi + cfg.epsilon * d).clamp(0.0, 1.0) - xi)
        .collect();
    let (exact_term, bound_given_delta) = eq10_bound(&jacobian, &spectrum, &delta);
    let worst = worst_case_bound(&jacobian, &spectrum.values, cfg.epsilon);
    let (jacobian_zero_ratio, hessian_zero_ratio) = sparsity_stats(&jacobian, &spectrum.values);
    Ok(SampleReport {
        index: 0,
        true_class,
        predicted: decision::predict(&logits),
        margin,
        jacobian_l1: jacobian.iter().map(|v| v.abs()).sum(),
        jacobian_zero_ratio,
        hessian_l1: spectrum.values.iter().map(|v| v.abs()).sum(),
        hessian_max: spectrum.values.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        hessian_zero_ratio: spectrum.complete.then_some(hessian_zero_ratio),
        exact_term,
        bound_given_delta,
        worst_case_bound: worst,
        certified: worst < margin,
        jacobian,
    })
}

/// Indicator over `sample_count` test inputs drawn with `seed`.
pub fn build_report(net: &Network, ds: &Dataset, cfg: &ReportConfig) -> Result<RobustnessReport> {
    if cfg.sample_count == 0 || cfg.sample_count > ds.len() {
        return Err(Error::validation(
            "indicator",
            format!("sample count {} must lie in 1..={}", cfg.sample_count, ds.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks = index::sample(&mut rng, ds.len(), cfg.sample_count).into_vec();
    picks.sort_unstable();
    let mut samples = Vec::with_capacity(picks.len());
    for i in picks {
        let s = &ds.samples[i];
        let mut r = sample_report(net, &s.features, s.label, cfg)?;
        r.index = i;
        samples.push(r);
    }
    let aggregate = aggregate(&samples);
    Ok(RobustnessReport { epsilon: cfg.epsilon, shape: ds.shape, samples, aggregate })
}

pub fn aggregate(samples: &[SampleReport]) -> ReportAggregate {
    let n = samples.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SampleReport) -> f64| samples.iter().map(f).sum::<f64>() / n;
    let zero = samples
        .iter()
        .map(|s| s.hessian_zero_ratio)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    ReportAggregate {
        samples: samples.len(),
        margin: mean(&|s| s.margin),
        jacobian_l1: mean(&|s| s.jacobian_l1),
        jacobian_zero_ratio: mean(&|s| s.jacobian_zero_ratio),
        hessian_l1: mean(&|s| s.hessian_l1),
        hessian_max: mean(&|s| s.hessian_max),
        hessian_zero_ratio: zero,
        exact_term: mean(&|s| s.exact_term),
        bound_given_delta: mean(&|s| s.bound_given_delta),
        worst_case_bound: mean(&|s| s.worst_case_bound),
        certified_fraction: mean(&|s| f64::from(u8::from(s.certified))),
    }
}

impl RobustnessReport {
    /// Tab-separated record per sample followed by a `# mean_*` block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# robustness report");
        let _ = writeln!(s, "# epsilon: {}", self.epsilon);
        let _ = writeln!(s, "# jacobian_zero_threshold: {JACOBIAN_ZERO:e}");
        let _ = writeln!(s, "# hessian_zero_threshold: {HESSIAN_ZERO:e}");
        s.push_str("index\ttrue_class\tpredicted\tmargin\tjacobian_l1\tjacobian_zero_ratio\thessian_l1\thessian_max\thessian_zero_ratio\texact_term\tbound_given_delta\tworst_case_bound\tcertified\n");
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.9e}"));
        for r in &self.samples {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{}",
                r.index,
                r.true_class,
                r.predicted,
                r.margin,
                r.jacobian_l1,
                r.jacobian_zero_ratio,
                r.hessian_l1,
                r.hessian_max,
                opt(r.hessian_zero_ratio),
                r.exact_term,
                r.bound_given_delta,
                r.worst_case_bound,
                r.certified
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(s, "# samples: {}", a.samples);
        for (k, v) in [
            ("margin", a.margin),
            ("jacobian_l1", a.jacobian_l1),
            ("jacobian_zero_ratio", a.jacobian_zero_ratio),
            ("hessian_l1", a.hessian_l1),
            ("hessian_max", a.hessian_max),
        ] {
            let _ = writeln!(s, "# mean_{k}: {v:.9e}");
        }
        let _ = writeln!(s, "# mean_hessian_zero_ratio: {}", opt(a.hessian_zero_ratio));
        for (k, v) in [
            ("exact_term", a.exact_term),
            ("bound_given_delta", a.bound_given_delta),
            ("worst_case_bound", a.worst_case_bound),
        ] {
            let _ = writeln!(s, "# mean_{k}: {v:.9e}");
        }
        let _ = writeln!(s, "# certified_fraction: {:.6}", a.certified_fraction);
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Writes `jacobian_<index>.pgm` for every sample into `dir`.
    pub fn write_jacobian_images(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for r in &self.samples {
            let path = dir.join(format!("jacobian_{}.pgm", r.index));
            fs::write(&path, jacobian_pgm(&r.jacobian, self.shape)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Binary graymap of a Jacobian min-max scaled to 0..=255. Channels are
/// stacked vertically.
pub fn jacobian_pgm(j: &[f64], shape: Shape) -> Result<Vec<u8>> {
    if j.len() != shape.len() {
        return Err(Error::Shape(format!("jacobian of length {} does not fit {shape}", j.len())));
    }
    let lo = j.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = j.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", shape.width, shape.height * shape.channels).into_bytes();
    out.extend(j.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }));
    Ok(out)
}
