//! Two-dimensional projections of the loss and decision functions.
//!
//! A plane is an origin `o` with two directions `alpha`, `beta`; the grid value
//! at lattice point `(i, j)` is `V(i, j) = F(o + i*step*alpha + j*step*beta)`
//! where `F` is the cross-entropy or the decision margin of one sample. Planes
//! live either in input space (the origin is the sample) or in parameter
//! space (the origin is the current parameter vector and the sample is fixed).
//!
//! Grid matrices are row-major with `i` indexing rows and `j` columns, so
//! `values[r][c]` holds `V(r - i_range, c - j_range)`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attacks::{attack_direction, Objective};
use crate::autodiff::dot;
use crate::decision;
use crate::error::{Error, Result};
use crate::nn::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Input,
    Parameter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BetaSource {
    Random,
    /// Sign of the attack gradient at the origin.
    Attack(Objective),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    UnitL2,
    FilterNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurfaceFunction {
    CrossEntropy,
    DecisionMargin,
}

macro_rules! named {
    ($ty:ty, $what:literal, $($variant:expr => $name:literal),+ $(,)?) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                $(if self == $variant { return $name; })+
                unreachable!()
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                $(if s == $name { return Ok($variant); })+
                Err(Error::validation($what, format!("unknown value `{s}`")))
            }
        }
    };
}

named!(Space, "space", Space::Input => "input", Space::Parameter => "parameter");
named!(Normalization, "normalization", Normalization::UnitL2 => "unit_l2", Normalization::FilterNorm => "filter_norm");
named!(SurfaceFunction, "surface function", SurfaceFunction::CrossEntropy => "cross_entropy", SurfaceFunction::DecisionMargin => "decision_margin");

impl BetaSource {
    pub fn name(self) -> String {
        match self {
            BetaSource::Random => "random".into(),
            BetaSource::Attack(o) => format!("attack:{}", o.name()),
        }
    }
}

impl fmt::Display for BetaSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for BetaSource {
    type Err = Error;
    /// `random`, `attack` (margin objective) or `attack:<objective>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BetaSource::Random),
            "attack" => Ok(BetaSource::Attack(Objective::CwMargin)),
            _ => match s.strip_prefix("attack:") {
                Some(o) => Ok(BetaSource::Attack(o.parse()?)),
                None => Err(Error::validation("beta source", format!("unknown value `{s}` (random, attack, attack:<objective>)"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionPlane {
    pub space: Space,
    /// The sample in input space, the parameter vector in parameter space.
    pub origin: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub beta_source: BetaSource,
    pub normalization: Normalization,
    pub seed: u64,
    /// The sample whose function is plotted.
    pub sample: Vec<f64>,
    pub true_class: usize,
    /// Free-form identifier written to grid files, e.g. `test[12]`.
    pub label: String,
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn scale_to_unit(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Removes from `v` its component along `u`.
fn orthogonalize(v: &mut [f64], u: &[f64]) {
    let uu = dot(u, u);
    if uu > 0.0 {
        let k = dot(v, u) / uu;
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= k * b);
    }
}

pub fn make_plane(net: &Network, sample: &[f64], true_class: usize, space: Space, beta_source: BetaSource, seed: u64) -> Result<ProjectionPlane> {
    if sample.len() != net.input_len() {
        return Err(Error::Shape(format!("sample of length {}, network expects {}", sample.len(), net.input_len())));
    }
    if true_class >= net.classes() {
        return Err(Error::validation("class index", format!("{true_class} out of range for {} classes", net.classes())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (origin, alpha, beta, normalization) = match (space, beta_source) {
        (Space::Parameter, BetaSource::Attack(_)) => {
            return Err(Error::validation("projection plane", "attack-sourced directions exist only in input space"));
        }
        (Space::Input, BetaSource::Random) => {
            let mut a = gaussian(sample.len(), &mut rng);
            let mut b = gaussian(sample.len(), &mut rng);
            scale_to_unit(&mut a);
            orthogonalize(&mut b, &a);
            scale_to_unit(&mut b);
            (sample.to_vec(), a, b, Normalization::UnitL2)
        }
        (Space::Input, BetaSource::Attack(objective)) => {
            let mut b = attack_direction(net, sample, true_class, objective)?;
            scale_to_unit(&mut b);
            let mut a = gaussian(sample.len(), &mut rng);
            orthogonalize(&mut a, &b);
            scale_to_unit(&mut a);
            (sample.to_vec(), a, b, Normalization::UnitL2)
        }
        (Space::Parameter, BetaSource::Random) => {
            let theta = net.params();
            let mut a = gaussian(theta.len(), &mut rng);
            let mut b = gaussian(theta.len(), &mut rng);
            for block in net.layer_blocks() {
                filter_normalize(&mut a[block.clone()], &theta[block.clone()]);
                filter_normalize(&mut b[block.clone()], &theta[block]);
            }
            orthogonalize(&mut b, &a);
            (theta.to_vec(), a, b, Normalization::FilterNorm)
        }
    };
    Ok(ProjectionPlane {
        space,
        origin,
        alpha,
        beta,
        beta_source,
        normalization,
        seed,
        sample: sample.to_vec(),
        true_class,
        label: String::from("sample"),
    })
}

/// Rescales one layer's slice of a direction to the norm of that layer's
/// parameters.
fn filter_normalize(d: &mut [f64], theta: &[f64]) {
    let (nd, nt) = (norm(d), norm(theta));
    if nd > 0.0 {
        d.iter_mut().for_each(|x| *x *= nt / nd);
    }
}

impl ProjectionPlane {
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// `o + a*alpha + b*beta`, clipped to `[0, 1]` in input space.
    pub fn point(&self, a: f64, b: f64) -> Vec<f64> {
        let p = self.origin.iter().zip(&self.alpha).zip(&self.beta).map(|((o, x), y)| o + a * x + b * y);
        match self.space {
            Space::Input => p.map(|v| v.clamp(0.0, 1.0)).collect(),
            Space::Parameter => p.collect(),
        }
    }

    pub fn cosine(&self) -> f64 {
        let d = norm(&self.alpha) * norm(&self.beta);
        if d == 0.0 {
            0.0
        } else {
            dot(&self.alpha, &self.beta) / d
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridMeta {
    pub space: Space,
    pub function: SurfaceFunction,
    pub origin: String,
    pub true_class: usize,
    pub seed: u64,
    pub beta_source: BetaSource,
    pub normalization: Normalization,
    pub step: f64,
    pub i_range: usize,
    pub j_range: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceGrid {
    pub meta: GridMeta,
    /// `(2 * i_range + 1)` rows of `(2 * j_range + 1)` values.
    pub values: Vec<Vec<f64>>,
}

impl SurfaceGrid {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// `V(i, j)` for lattice coordinates in `-range..=range`.
    pub fn at(&self, i: isize, j: isize) -> f64 {
        let r = (i + self.meta.i_range as isize) as usize;
        let c = (j + self.meta.j_range as isize) as usize;
        self.values[r][c]
    }
}

fn evaluate(logits: &[f64], function: SurfaceFunction, t: usize) -> Result<f64> {
    match function {
        SurfaceFunction::CrossEntropy => decision::cross_entropy(logits, t),
        SurfaceFunction::DecisionMargin => decision::margin(logits, t),
    }
}

/// Evaluates `V` on the `(2*i_range+1) x (2*j_range+1)` lattice. The stored
/// network is never modified; parameter-space points are installed on a copy.
pub fn eval_grid(net: &Network, plane: &ProjectionPlane, i_range: usize, j_range: usize, step: f64, function: SurfaceFunction) -> Result<SurfaceGrid> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::validation("grid step", "step must be positive and finite"));
    }
    let expected = match plane.space {
        Space::Input => net.input_len(),
        Space::Parameter => net.params().len(),
    };
    if plane.origin.len() != expected || plane.alpha.len() != expected || plane.beta.len() != expected {
        return Err(Error::Shape(format!("plane directions do not match the {} space of dimension {expected}", plane.space)));
    }
    let mut scratch = net.clone();
    let mut values = Vec::with_capacity(2 * i_range + 1);
    for i in -(i_range as isize)..=i_range as isize {
        let mut row = Vec::with_capacity(2 * j_range + 1);
        for j in -(j_range as isize)..=j_range as isize {
            let p = plane.point(i as f64 * step, j as f64 * step);
            let logits = match plane.space {
                Space::Input => net.forward(&p)?,
                Space::Parameter => {
                    scratch.params_mut().copy_from_slice(&p);
                    scratch.forward(&plane.sample)?
                }
            };
            row.push(evaluate(&logits, function, plane.true_class)?);
        }
        values.push(row);
    }
    Ok(SurfaceGrid {
        meta: GridMeta {
            space: plane.space,
            function,
            origin: plane.label.clone(),
            true_class: plane.true_class,
            seed: plane.seed,
            beta_source: plane.beta_source,
            normalization: plane.normalization,
            step,
            i_range,
            j_range,
        },
        values,
    })
}

/// One piece of the zero contour, in lattice coordinates `(i, j)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

/// First sign flip of the margin along the `+j` axis through the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crossing {
    /// Last lattice column with a positive margin (`None` if the origin
    /// itself is not positive).
    pub before: Option<usize>,
    /// First lattice column with a non-positive margin.
    pub after: usize,
    /// Linearly interpolated crossing coordinate in lattice units.
    pub j: f64,
    /// `j * step`.
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Boundary {
    pub segments: Vec<Segment>,
    pub first_crossing: Option<Crossing>,
}

impl Boundary {
    /// Joins segments that share endpoints into polylines.
    pub fn polylines(&self) -> Vec<Vec<(f64, f64)>> {
        let mut left: Vec<Segment> = self.segments.clone();
        let mut lines = Vec::new();
        while let Some(s) = left.pop() {
            let mut line = vec![s.a, s.b];
            loop {
                let tail = *line.last().expect("non-empty");
                let head = line[0];
                if let Some(k) = left.iter().position(|t| t.a == tail || t.b == tail) {
                    let t = left.swap_remove(k);
                    line.push(if t.a == tail { t.b } else { t.a });
                } else if let Some(k) = left.iter().position(|t| t.a == head || t.b == head) {
                    let t = left.swap_remove(k);
                    line.insert(0, if t.a == head { t.b } else { t.a });
                } else {
                    break;
                }
            }
            lines.push(line);
        }
        lines
    }
}

/// Zero crossing on the edge between corner values `va` at `pa` and `vb` at
/// `pb`. Corners are always passed in increasing lattice order so that the
/// two cells sharing an edge compute bit-identical points.
fn edge_point(pa: (f64, f64), va: f64, pb: (f64, f64), vb: f64) -> (f64, f64) {
    let t = va / (va - vb);
    (pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1))
}

/// Marching squares on the zero level of a margin grid. A corner counts as
/// inside when its value is `<= 0`, matching the tie-is-incorrect rule.
pub fn extract_boundary(grid: &SurfaceGrid) -> Result<Boundary> {
    if grid.meta.function != SurfaceFunction::DecisionMargin {
        return Err(Error::validation("boundary", "the zero contour is defined for decision_margin grids"));
    }
    let (ir, jr) = (grid.meta.i_range as f64, grid.meta.j_range as f64);
    let v = &grid.values;
    let pos = |r: usize, c: usize| (r as f64 - ir, c as f64 - jr);
    let inside = |x: f64| x <= 0.0;
    let mut segments = Vec::new();
    for r in 0..grid.rows().saturating_sub(1) {
        for c in 0..grid.cols().saturating_sub(1) {
            let (v00, v01, v10, v11) = (v[r][c], v[r][c + 1], v[r + 1][c], v[r + 1][c + 1]);
            let mut pts = Vec::with_capacity(4);
            // Edges in a fixed cyclic order: top, right, bottom, left.
            let edges = [
                ((r, c), v00, (r, c + 1), v01),
                ((r, c + 1), v01, (r + 1, c + 1), v11),
                ((r + 1, c), v10, (r + 1, c + 1), v11),
                ((r, c), v00, (r + 1, c), v10),
            ];
            for &((ra, ca), va, (rb, cb), vb) in &edges {
                if inside(va) != inside(vb) {
                    pts.push(edge_point(pos(ra, ca), va, pos(rb, cb), vb));
                }
            }
            match pts.len() {
                2 => segments.push(Segment { a: pts[0], b: pts[1] }),
                4 => {
                    // Saddle: the center value decides which corners connect.
                    let center = 0.25 * (v00 + v01 + v10 + v11);
                    if inside(center) == inside(v00) {
                        segments.push(Segment { a: pts[0], b: pts[1] });
                        segments.push(Segment { a: pts[2], b: pts[3] });
                    } else {
                        segments.push(Segment { a: pts[0], b: pts[3] });
                        segments.push(Segment { a: pts[1], b: pts[2] });
                    }
                }
                _ => {}
            }
        }
    }
    Ok(Boundary { segments, first_crossing: first_crossing(grid) })
}

fn first_crossing(grid: &SurfaceGrid) -> Option<Crossing> {
    let row = &grid.values[grid.meta.i_range];
    let start = grid.meta.j_range;
    if row[start] <= 0.0 {
        return Some(Crossing { before: None, after: 0, j: 0.0, distance: 0.0 });
    }
    for c in start + 1..row.len() {
        if row[c] <= 0.0 {
            let (a, b) = (row[c - 1], row[c]);
            let j = (c - 1 - start) as f64 + a / (a - b);
            return Some(Crossing { before: Some(c - 1 - start), after: c - start, j, distance: j * grid.meta.step });
        }
    }
    None
}

/// Text form: `# key: value` header lines, then `i j value` per lattice point
/// in row-major order with 17 significant digits.
pub fn grid_to_string(grid: &SurfaceGrid) -> String {
    let m = &grid.meta;
    let mut s = String::from("# decision-surface grid v1\n");
    for (k, v) in [
        ("space", m.space.to_string()),
        ("function", m.function.to_string()),
        ("origin", m.origin.clone()),
        ("true_class", m.true_class.to_string()),
        ("seed", m.seed.to_string()),
        ("beta_source", m.beta_source.to_string()),
        ("normalization", m.normalization.to_string()),
        ("step", format!("{:.16e}", m.step)),
        ("i_range", m.i_range.to_string()),
        ("j_range", m.j_range.to_string()),
    ] {
        s.push_str(&format!("# {k}: {v}\n"));
    }
    for (r, row) in grid.values.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let i = r as isize - m.i_range as isize;
            let j = c as isize - m.j_range as isize;
            s.push_str(&format!("{i} {j} {v:.16e}\n"));
        }
    }
    s
}

pub fn write_grid(grid: &SurfaceGrid, path: &Path) -> Result<()> {
    fs::write(path, grid_to_string(grid)).map_err(|e| Error::io(path, e))
}

pub fn parse_grid(text: &str, origin: &Path) -> Result<SurfaceGrid> {
    let bad = |line: usize, reason: String| Error::format(origin, format!("line {line}: {reason}"));
    let mut header = BTreeMap::new();
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let n = n + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once(':') {
                header.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(bad(n, format!("expected `i j value`, got {} fields", f.len())));
        }
        let i: isize = f[0].parse().map_err(|_| bad(n, format!("bad i `{}`", f[0])))?;
        let j: isize = f[1].parse().map_err(|_| bad(n, format!("bad j `{}`", f[1])))?;
        let v: f64 = f[2].parse().map_err(|_| bad(n, format!("bad value `{}`", f[2])))?;
        records.push((n, i, j, v));
    }
    let get = |k: &str| header.get(k).ok_or_else(|| Error::format(origin, format!("missing header `{k}`")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::format(origin, format!("header `{k}` is not an integer"))) };
    let field = |k: &str, e: Error| Error::format(origin, format!("header `{k}`: {e}"));
    let meta = GridMeta {
        space: get("space")?.parse().map_err(|e| field("space", e))?,
        function: get("function")?.parse().map_err(|e| field("function", e))?,
        origin: get("origin")?.clone(),
        true_class: num("true_class")?,
        seed: get("seed")?.parse().map_err(|_| Error::format(origin, "header `seed` is not an integer"))?,
        beta_source: get("beta_source")?.parse().map_err(|e| field("beta_source", e))?,
        normalization: get("normalization")?.parse().map_err(|e| field("normalization", e))?,
        step: get("step")?.parse().map_err(|_| Error::format(origin, "header `step` is not a number"))?,
        i_range: num("i_range")?,
        j_range: num("j_range")?,
    };
    let (rows, cols) = (2 * meta.i_range + 1, 2 * meta.j_range + 1);
    if records.len() != rows * cols {
        return Err(Error::format(origin, format!("expected {} records, found {}", rows * cols, records.len())));
    }
    let mut values = vec![Vec::with_capacity(cols); rows];
    for (k, &(n, i, j, v)) in records.iter().enumerate() {
        let (r, c) = (k / cols, k % cols);
        if i != r as isize - meta.i_range as isize || j != c as isize - meta.j_range as isize {
            return Err(bad(n, format!("record ({i}, {j}) out of row-major order")));
        }
        values[r].push(v);
    }
    Ok(SurfaceGrid { meta, values })
}

pub fn read_grid(path: &Path) -> Result<SurfaceGrid> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid(&text, path)
}
