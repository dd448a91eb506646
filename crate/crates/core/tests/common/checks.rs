//! Measurements shared by the oracle suites and the acceptance report. Each
//! returns the numbers it measured; callers decide on tolerances.

use decision_surface::attacks::{run_attack, AttackSpec, Objective};
use decision_surface::autodiff::Graph;
use decision_surface::data::Dataset;
use decision_surface::decision::{cross_entropy_node, margin, margin_node};
use decision_surface::indicator::{eig_sym, eq10_bound, input_jacobian, quadratic_form_identity_check, HessianOperator};
use decision_surface::nn::{Network, ParamVars};
use decision_surface::surface::{eval_grid, make_plane, BetaSource, Space, SurfaceFunction};
use decision_surface::training::{norm_node, NormKind};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{central_diff, directional_diff, max_rel_err, small_conv_net, small_smooth_net, values};

fn margin_at(net: &Network, x: &[f64], t: usize) -> f64 {
    margin(&net.forward(x).unwrap(), t).unwrap()
}

/// `d margin / dx` and `d CE / d theta` from the tape.
fn tape_gradients(net: &Network, x: &[f64], t: usize) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let p = net.bind_params(&mut g, true);
    let xv = g.leaf(x.to_vec());
    let z = net.forward_graph(&mut g, &p, xv).unwrap();
    let m = margin_node(&mut g, z, t).unwrap();
    let gx = g.gradient(m, &[xv]).unwrap().remove(0);
    let ce = cross_entropy_node(&mut g, z, t).unwrap();
    let gp = ParamVars::flatten(&g.gradient(ce, &p.all()).unwrap());
    (gx, gp)
}

fn input_gradient(net: &Network, x: &[f64], t: usize) -> Vec<f64> {
    tape_gradients(net, x, t).0
}

/// `d |d margin/dx|_2 / d theta` by double backpropagation.
fn penalty_param_gradient(net: &Network, x: &[f64], t: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let p = net.bind_params(&mut g, true);
    let xv = g.leaf(x.to_vec());
    let z = net.forward_graph(&mut g, &p, xv).unwrap();
    let m = margin_node(&mut g, z, t).unwrap();
    ParamVars::flatten(&g.mixed_second(m, xv, &p.all(), |g, gx| norm_node(g, gx, NormKind::L2)).unwrap())
}

fn penalty_value(net: &Network, x: &[f64], t: usize) -> f64 {
    NormKind::L2.apply(&input_gradient(net, x, t))
}

/// Hessian of the margin assembled column by column from raw HVPs, without
/// symmetrization.
fn raw_hessian(net: &Network, x: &[f64], t: usize) -> DMatrix<f64> {
    let mut op = HessianOperator::new(net, x, t).unwrap();
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        h.set_column(c, &nalgebra::DVector::from_vec(op.apply(&e).unwrap()));
    }
    h
}

#[derive(Debug, Default)]
pub struct AutodiffOracle {
    pub input_grad_rel: f64,
    pub param_grad_rel: f64,
    pub hvp_rel: f64,
    pub mixed_rel: f64,
    pub hessian_asymmetry: f64,
    pub cases: usize,
}

/// Dense and convolutional smooth nets, several seeds and classes.
pub fn autodiff_oracle() -> AutodiffOracle {
    let mut r = AutodiffOracle::default();
    for seed in 0..4u64 {
        for (k, net) in [small_smooth_net(seed), small_conv_net(seed)].into_iter().enumerate() {
            let x = values(net.input_len(), 100 + seed * 7 + k as u64, 0.1, 0.9);
            let t = (seed as usize + k) % net.classes();
            let (gx, gp) = tape_gradients(&net, &x, t);

            let fd_x = central_diff(|p| margin_at(&net, p, t), &x, 1e-5);
            r.input_grad_rel = r.input_grad_rel.max(max_rel_err(&gx, &fd_x, 1e-4));

            let theta = net.params().to_vec();
            let ce_at = |th: &[f64]| {
                let n = net.with_params(th.to_vec()).unwrap();
                decision_surface::decision::cross_entropy(&n.forward(&x).unwrap(), t).unwrap()
            };
            r.param_grad_rel = r.param_grad_rel.max(max_rel_err(&gp, &central_diff(ce_at, &theta, 1e-5), 1e-4));

            let v = values(x.len(), 500 + seed, -1.0, 1.0);
            let mut op = HessianOperator::new(&net, &x, t).unwrap();
            let hv = op.apply(&v).unwrap();
            let fd_hv = directional_diff(|p| input_gradient(&net, p, t), &x, &v, 1e-4);
            r.hvp_rel = r.hvp_rel.max(max_rel_err(&hv, &fd_hv, 1e-3));

            let mixed = penalty_param_gradient(&net, &x, t);
            let fd_mixed = central_diff(|th| penalty_value(&net.with_params(th.to_vec()).unwrap(), &x, t), &theta, 1e-5);
            r.mixed_rel = r.mixed_rel.max(max_rel_err(&mixed, &fd_mixed, 1e-3));

            let h = raw_hessian(&net, &x, t);
            r.hessian_asymmetry = r.hessian_asymmetry.max((&h - h.transpose()).amax());
            r.cases += 1;
        }
    }
    r
}

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&a + a.transpose()) * 0.5
}

#[derive(Debug, Default)]
pub struct SpectralSuite {
    pub draws: usize,
    /// Largest `|lhs - rhs| / max(1, sum |lambda| * |delta|^2)` of the quadratic-form identity.
    pub identity_err: f64,
    pub bound_violations: usize,
    pub reconstruction_err: f64,
    pub orthonormality_err: f64,
}

/// `draws` random symmetric matrices of size 1..=12 with random perturbations,
/// plus `big` random 50x50 matrices for the decomposition invariants.
pub fn spectral_suite(draws: usize, big: usize, seed: u64) -> SpectralSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SpectralSuite { draws, ..Default::default() };
    for _ in 0..draws {
        let n = rng.random_range(1..=12);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let h = random_symmetric(n, &mut rng) * scale;
        let spec = eig_sym(&h).unwrap();
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let j: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let (lhs, rhs) = quadratic_form_identity_check(&h, &spec, &delta);
        let quad_scale = spec.values.iter().map(|l| l.abs()).sum::<f64>() * delta.iter().map(|d| d * d).sum::<f64>();
        s.identity_err = s.identity_err.max((lhs - rhs).abs() / quad_scale.max(1.0));
        let (exact, bound) = eq10_bound(&j, &spec, &delta);
        if exact > bound {
            s.bound_violations += 1;
        }
    }
    for _ in 0..big {
        let h = random_symmetric(50, &mut rng);
        let spec = eig_sym(&h).unwrap();
        s.reconstruction_err = s.reconstruction_err.max((spec.reconstruct() - &h).amax());
        let e = &spec.vectors;
        s.orthonormality_err = s.orthonormality_err.max((e.transpose() * e - DMatrix::identity(50, 50)).amax());
    }
    s
}

/// Per-direction least-squares slopes of `log R(h)` against `log h`, where
/// `R(h) = |L(x + h d) - L(x) - h J.d - h^2/2 d^T H d|`.
pub fn taylor_slopes(net: &Network, x: &[f64], t: usize, directions: usize, steps: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l0 = margin_at(net, x, t);
    let j = input_jacobian(net, x, t).unwrap();
    let mut op = HessianOperator::new(net, x, t).unwrap();
    (0..directions)
        .map(|_| {
            // Random sign pattern: the shape of an l_inf perturbation.
            let d: Vec<f64> = (0..x.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let jd: f64 = j.iter().zip(&d).map(|(a, b)| a * b).sum();
            let dhd: f64 = op.apply(&d).unwrap().iter().zip(&d).map(|(a, b)| a * b).sum();
            let pts: Vec<(f64, f64)> = steps
                .iter()
                .map(|&h| {
                    let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + h * b).collect();
                    let r = (margin_at(net, &xp, t) - l0 - h * jd - 0.5 * h * h * dhd).abs();
                    (h.ln(), r.ln())
                })
                .collect();
            let n = pts.len() as f64;
            let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
            sxy / sxx
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct GridConsistency {
    pub points: usize,
    pub max_err: f64,
    pub origin_err: f64,
}

/// Re-evaluates every grid point of input- and parameter-space planes with a
/// freshly built network and compares.
pub fn grid_consistency(net: &Network, ds: &Dataset, samples: usize, range: usize) -> GridConsistency {
    let mut r = GridConsistency::default();
    for (k, s) in ds.samples.iter().take(samples).enumerate() {
        for (space, beta) in [(Space::Input, BetaSource::Random), (Space::Input, BetaSource::Attack(Objective::CwMargin)), (Space::Parameter, BetaSource::Random)] {
            let plane = make_plane(net, &s.features, s.label, space, beta, k as u64).unwrap();
            for function in [SurfaceFunction::CrossEntropy, SurfaceFunction::DecisionMargin] {
                let step = if space == Space::Input { 0.25 } else { 0.05 };
                let grid = eval_grid(net, &plane, range, range, step, function).unwrap();
                for (r_i, row) in grid.values.iter().enumerate() {
                    for (c_j, &v) in row.iter().enumerate() {
                        let (i, j) = (r_i as f64 - range as f64, c_j as f64 - range as f64);
                        let p = plane.point(i * step, j * step);
                        let (model, x) = match space {
                            Space::Input => (net.clone(), p),
                            Space::Parameter => (Network::from_params(net.spec().clone(), net.seed(), p).unwrap(), s.features.clone()),
                        };
                        let z = model.forward(&x).unwrap();
                        let direct = match function {
                            SurfaceFunction::CrossEntropy => decision_surface::decision::cross_entropy(&z, s.label).unwrap(),
                            SurfaceFunction::DecisionMargin => margin(&z, s.label).unwrap(),
                        };
                        r.max_err = r.max_err.max((v - direct).abs());
                        r.points += 1;
                    }
                }
                let z = net.forward(&s.features).unwrap();
                let direct = match function {
                    SurfaceFunction::CrossEntropy => decision_surface::decision::cross_entropy(&z, s.label).unwrap(),
                    SurfaceFunction::DecisionMargin => margin(&z, s.label).unwrap(),
                };
                r.origin_err = r.origin_err.max((grid.at(0, 0) - direct).abs());
            }
        }
    }
    r
}

/// Number of samples where FGSM and one BIM step of size epsilon disagree in
/// any bit of the perturbed input.
pub fn fgsm_bim_mismatches(net: &Network, ds: &Dataset, samples: usize, epsilons: &[f64]) -> usize {
    let mut bad = 0;
    for s in ds.samples.iter().take(samples) {
        for &e in epsilons {
            let a = run_attack(net, &s.features, s.label, &AttackSpec::fgsm(e)).unwrap();
            let b = run_attack(net, &s.features, s.label, &AttackSpec::bim(e, e, 1)).unwrap();
            if a.perturbed.iter().zip(&b.perturbed).any(|(p, q)| p.to_bits() != q.to_bits()) || a.success != b.success {
                bad += 1;
            }
        }
    }
    bad
}

/// Paired first-crossing distances along +j: `(random, adversarial)` per
/// sample, `INFINITY` when the grid does not reach the boundary.
pub fn crossing_pairs(net: &Network, ds: &Dataset, samples: usize, range: usize, step: f64) -> Vec<(f64, f64)> {
    use decision_surface::surface::extract_boundary;
    let mut out = Vec::new();
    for (k, s) in ds.samples.iter().enumerate() {
        if out.len() == samples {
            break;
        }
        // The comparison is about correctly classified points.
        if margin_at(net, &s.features, s.label) <= 0.0 {
            continue;
        }
        let mut d = [f64::INFINITY; 2];
        for (slot, beta) in [BetaSource::Random, BetaSource::Attack(Objective::CwMargin)].into_iter().enumerate() {
            let plane = make_plane(net, &s.features, s.label, Space::Input, beta, k as u64).unwrap();
            let grid = eval_grid(net, &plane, range, range, step, SurfaceFunction::DecisionMargin).unwrap();
            if let Some(c) = extract_boundary(&grid).unwrap().first_crossing {
                d[slot] = c.distance;
            }
        }
        out.push((d[0], d[1]));
    }
    out
}
