//! Small classifiers (dense and convolutional) with a flat parameter vector.
//!
//! A [`Network`] is a validated [`NetworkSpec`] plus one flat `Vec<f64>` of
//! parameters, laid out layer by layer as `weights, biases`. The forward
//! pass is recorded on an autodiff [`Graph`], so the same code path yields
//! logits, input gradients and parameter gradients.
//!
//! ReLU networks are piecewise linear: their input Hessian is zero almost
//! everywhere. Use a softplus (or tanh) network for anything curvature
//! related; the `mnist-mlp` preset exists for that purpose.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeometry, Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
    Tanh,
}

impl Activation {
    fn apply(self, g: &mut Graph, v: Var) -> Var {
        match self {
            Activation::Identity => v,
            Activation::Relu => g.relu(v),
            Activation::Softplus => g.softplus(v),
            Activation::Tanh => g.tanh(v),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" | "linear" => Activation::Identity,
            "relu" => Activation::Relu,
            "softplus" => Activation::Softplus,
            "tanh" => Activation::Tanh,
            _ => return Err(Error::validation("activation", format!("unknown activation `{s}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Channel-major input or feature-map shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape { channels, height, width }
    }

    /// A plain feature vector of length `n`.
    pub fn flat(n: usize) -> Self {
        Shape::new(1, 1, n)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        units: usize,
        activation: Activation,
    },
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    /// Non-overlapping pooling with stride equal to the window.
    Pool { kind: PoolKind, window: usize },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Dense { units, activation } => write!(f, "dense {units} {}", activation.name()),
            LayerSpec::Conv {
                channels,
                kernel,
                stride,
                padding,
                activation,
            } => write!(f, "conv {channels} {kernel} {stride} {padding} {}", activation.name()),
            LayerSpec::Pool { kind, window } => {
                let k = if kind == PoolKind::Max { "max" } else { "avg" };
                write!(f, "pool {k} {window}")
            }
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    /// Parses `dense <units> <act>`, `conv <channels> <kernel> <stride> <padding> <act>`
    /// or `pool <max|avg> <window>`.
    fn from_str(s: &str) -> Result<Self> {
        let tok: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::validation("layer", format!("cannot parse `{s}`"));
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        match tok.as_slice() {
            ["dense", units, act] => Ok(LayerSpec::Dense {
                units: num(units)?,
                activation: act.parse()?,
            }),
            ["conv", c, k, st, p, act] => Ok(LayerSpec::Conv {
                channels: num(c)?,
                kernel: num(k)?,
                stride: num(st)?,
                padding: num(p)?,
                activation: act.parse()?,
            }),
            ["pool", kind, w] => Ok(LayerSpec::Pool {
                kind: match *kind {
                    "max" => PoolKind::Max,
                    "avg" => PoolKind::Avg,
                    _ => return Err(bad()),
                },
                window: num(w)?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

impl NetworkSpec {
    /// 784-300-100-10 softplus MLP. Smooth, so its input Hessian is informative.
    pub fn mnist_mlp() -> Self {
        NetworkSpec {
            input: Shape::new(1, 28, 28),
            layers: vec![
                LayerSpec::Dense { units: 300, activation: Activation::Softplus },
                LayerSpec::Dense { units: 100, activation: Activation::Softplus },
                LayerSpec::Dense { units: 10, activation: Activation::Identity },
            ],
            classes: 10,
        }
    }

    /// Two ReLU convolutions with max pooling, then two dense layers.
    pub fn mnist_conv() -> Self {
        NetworkSpec {
            input: Shape::new(1, 28, 28),
            layers: vec![
                LayerSpec::Conv { channels: 16, kernel: 5, stride: 1, padding: 0, activation: Activation::Relu },
                LayerSpec::Pool { kind: PoolKind::Max, window: 2 },
                LayerSpec::Conv { channels: 32, kernel: 5, stride: 1, padding: 0, activation: Activation::Relu },
                LayerSpec::Pool { kind: PoolKind::Max, window: 2 },
                LayerSpec::Dense { units: 100, activation: Activation::Relu },
                LayerSpec::Dense { units: 10, activation: Activation::Identity },
            ],
            classes: 10,
        }
    }

    /// Small tanh MLP for low-dimensional synthetic data.
    pub fn blobs_mlp(dim: usize, classes: usize) -> Self {
        NetworkSpec {
            input: Shape::flat(dim),
            layers: vec![
                LayerSpec::Dense { units: 16, activation: Activation::Tanh },
                LayerSpec::Dense { units: classes, activation: Activation::Identity },
            ],
            classes,
        }
    }

    /// Looks up a named preset. `input` and `classes` only matter for `blobs-mlp`.
    pub fn preset(name: &str, input: Shape, classes: usize) -> Result<Self> {
        match name {
            "mnist-mlp" => Ok(Self::mnist_mlp()),
            "mnist-conv" => Ok(Self::mnist_conv()),
            "blobs-mlp" => Ok(Self::blobs_mlp(input.len(), classes)),
            _ => Err(Error::validation("preset", format!("unknown network preset `{name}`"))),
        }
    }

    /// Total parameter count (validates the spec).
    pub fn param_count(&self) -> Result<usize> {
        Ok(resolve(self)?.1)
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Dense {
        in_len: usize,
        activation: Activation,
        weights: Range<usize>,
        bias: Range<usize>,
    },
    Conv {
        geom: Rc<ConvGeometry>,
        activation: Activation,
        weights: Range<usize>,
        bias: Range<usize>,
        /// Output position -> channel, for broadcasting the bias.
        bias_index: Vec<usize>,
    },
    Pool {
        kind: PoolKind,
        /// For each output cell, the input positions of its window.
        windows: Vec<Vec<usize>>,
    },
}

fn resolve(spec: &NetworkSpec) -> Result<(Vec<Layer>, usize)> {
    if spec.classes < 2 {
        return Err(Error::validation("network spec", "at least two classes are required"));
    }
    if spec.input.is_empty() {
        return Err(Error::validation("network spec", "empty input shape"));
    }
    let mut shape = spec.input;
    let mut offset = 0;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Dense { units, activation } => {
                if units == 0 {
                    return Err(Error::validation("network spec", format!("layer {i}: zero units")));
                }
                let in_len = shape.len();
                let weights = offset..offset + units * in_len;
                let bias = weights.end..weights.end + units;
                offset = bias.end;
                layers.push(Layer::Dense { in_len, activation, weights, bias });
                shape = Shape::flat(units);
            }
            LayerSpec::Conv { channels, kernel, stride, padding, activation } => {
                let geom = ConvGeometry::new((shape.channels, shape.height, shape.width), channels, kernel, stride, padding)
                    .map_err(|e| Error::validation("network spec", format!("layer {i}: {e}")))?;
                let weights = offset..offset + geom.kernel_len();
                let bias = weights.end..weights.end + channels;
                offset = bias.end;
                let plane = geom.out_height * geom.out_width;
                let bias_index = (0..geom.output_len()).map(|p| p / plane).collect();
                shape = Shape::new(channels, geom.out_height, geom.out_width);
                layers.push(Layer::Conv { geom: Rc::new(geom), activation, weights, bias, bias_index });
            }
            LayerSpec::Pool { kind, window } => {
                if window == 0 || window > shape.height || window > shape.width {
                    return Err(Error::validation("network spec", format!("layer {i}: pool window {window} does not fit {shape}")));
                }
                let (oh, ow) = (shape.height / window, shape.width / window);
                let mut windows = Vec::with_capacity(shape.channels * oh * ow);
                for c in 0..shape.channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut w = Vec::with_capacity(window * window);
                            for dy in 0..window {
                                for dx in 0..window {
                                    w.push((c * shape.height + oy * window + dy) * shape.width + ox * window + dx);
                                }
                            }
                            windows.push(w);
                        }
                    }
                }
                layers.push(Layer::Pool { kind, windows });
                shape = Shape::new(shape.channels, oh, ow);
            }
        }
    }
    match spec.layers.last() {
        Some(LayerSpec::Dense { units, .. }) if *units == spec.classes => Ok((layers, offset)),
        _ => Err(Error::validation(
            "network spec",
            format!("final layer must be dense with {} units", spec.classes),
        )),
    }
}

/// Parameter nodes bound into a graph, one `(weights, bias)` pair per
/// parametric layer.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pairs: Vec<(Var, Var)>,
}

impl ParamVars {
    /// All parameter nodes in flat-vector order.
    pub fn all(&self) -> Vec<Var> {
        self.pairs.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Concatenates per-node gradients (in [`ParamVars::all`] order) into one flat vector.
    pub fn flatten(grads: &[Vec<f64>]) -> Vec<f64> {
        grads.concat()
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    seed: u64,
    params: Vec<f64>,
    layers: Vec<Layer>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.seed == other.seed && self.params == other.params
    }
}

impl Network {
    /// Fan-in scaled uniform weights, zero biases. Deterministic per seed.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let (layers, count) = resolve(&spec)?;
        let mut params = vec![0.0; count];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &layers {
            let (range, fan_in, act) = match layer {
                Layer::Dense { in_len, activation, weights, .. } => (weights.clone(), *in_len, *activation),
                Layer::Conv { geom, activation, weights, .. } => {
                    (weights.clone(), geom.in_channels * geom.kernel * geom.kernel, *activation)
                }
                Layer::Pool { .. } => continue,
            };
            let gain = if act == Activation::Relu { 6.0 } else { 3.0 };
            let bound = (gain / fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(Network { spec, seed, params, layers })
    }

    /// Builds a network from explicit parameters.
    pub fn from_params(spec: NetworkSpec, seed: u64, params: Vec<f64>) -> Result<Self> {
        let (layers, count) = resolve(&spec)?;
        if params.len() != count {
            return Err(Error::Shape(format!("spec needs {count} parameters, got {}", params.len())));
        }
        Ok(Network { spec, seed, params, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_len(&self) -> usize {
        self.spec.input.len()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Copy of this network with a different parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        Ok(Network { params, ..self.clone() })
    }

    /// Parameter ranges of each parametric layer (weights followed by bias).
    pub fn layer_blocks(&self) -> Vec<Range<usize>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense { weights, bias, .. } | Layer::Conv { weights, bias, .. } => Some(weights.start..bias.end),
                Layer::Pool { .. } => None,
            })
            .collect()
    }

    /// Places the parameters in `g`, as leaves when `trainable`, otherwise as constants.
    pub fn bind_params(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let mut pairs = Vec::new();
        for layer in &self.layers {
            let (w, b) = match layer {
                Layer::Dense { weights, bias, .. } | Layer::Conv { weights, bias, .. } => (weights, bias),
                Layer::Pool { .. } => continue,
            };
            let (wv, bv) = (self.params[w.clone()].to_vec(), self.params[b.clone()].to_vec());
            pairs.push(if trainable {
                (g.leaf(wv), g.leaf(bv))
            } else {
                (g.constant(wv), g.constant(bv))
            });
        }
        ParamVars { pairs }
    }

    /// Records the forward pass from input node `x` to the logit node.
    pub fn forward_graph(&self, g: &mut Graph, params: &ParamVars, x: Var) -> Result<Var> {
        let got = g.value(x).len();
        if got != self.input_len() {
            return Err(Error::Shape(format!("input of length {got}, network expects {}", self.input_len())));
        }
        let mut h = x;
        let mut pairs = params.pairs.iter();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense { activation, .. } => {
                    let &(w, b) = pairs.next().expect("one parameter pair per dense layer");
                    let z = g.matvec(w, h)?;
                    let z = g.add(z, b)?;
                    activation.apply(g, z)
                }
                Layer::Conv { geom, activation, bias_index, .. } => {
                    let &(w, b) = pairs.next().expect("one parameter pair per conv layer");
                    let z = g.conv2d(h, w, geom)?;
                    let bb = g.gather(b, bias_index.as_slice())?;
                    let z = g.add(z, bb)?;
                    activation.apply(g, z)
                }
                Layer::Pool { kind: PoolKind::Max, windows } => {
                    let v = g.value(h);
                    let picks: Vec<usize> = windows
                        .iter()
                        .map(|w| {
                            // First maximum wins ties.
                            let mut best = w[0];
                            for &i in &w[1..] {
                                if v[i] > v[best] {
                                    best = i;
                                }
                            }
                            best
                        })
                        .collect();
                    g.gather(h, picks)?
                }
                Layer::Pool { kind: PoolKind::Avg, windows } => {
                    let size = windows[0].len();
                    let src: Vec<usize> = windows.iter().flatten().copied().collect();
                    let dst: Vec<usize> = (0..windows.len()).flat_map(|o| std::iter::repeat_n(o, size)).collect();
                    let picked = g.gather(h, src)?;
                    let summed = g.scatter_add(picked, dst, windows.len())?;
                    g.scale(summed, 1.0 / size as f64)
                }
            };
        }
        Ok(h)
    }

    /// Logits `Z(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind_params(&mut g, false);
        let xv = g.constant(x.to_vec());
        let z = self.forward_graph(&mut g, &p, xv)?;
        Ok(g.value(z).to_vec())
    }

    /// Evaluates a scalar head of the logits at `x` and its gradient with
    /// respect to the input. Returns `(logits, head value, gradient)`.
    pub fn input_gradient<F>(&self, x: &[f64], head: F) -> Result<(Vec<f64>, f64, Vec<f64>)>
    where
        F: FnOnce(&mut Graph, Var) -> Result<Var>,
    {
        let mut g = Graph::new();
        let p = self.bind_params(&mut g, false);
        let xv = g.leaf(x.to_vec());
        let z = self.forward_graph(&mut g, &p, xv)?;
        let out = head(&mut g, z)?;
        let value = g.scalar(out);
        let logits = g.value(z).to_vec();
        let grad = g.gradient(out, &[xv])?.remove(0);
        Ok((logits, value, grad))
    }

    /// Serializes spec, seed and parameters (17 significant digits, exact round trip).
    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        s.push_str("decision-surface checkpoint v1\n");
        s.push_str(&format!("seed {}\n", self.seed));
        s.push_str(&format!("input {}\n", self.spec.input));
        s.push_str(&format!("classes {}\n", self.spec.classes));
        for l in &self.spec.layers {
            s.push_str(&format!("layer {l}\n"));
        }
        s.push_str(&format!("params {}\n", self.params.len()));
        for p in &self.params {
            s.push_str(&format!("{p:.16e}\n"));
        }
        s
    }

    pub fn from_checkpoint_str(text: &str, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "decision-surface checkpoint v1")) => {}
            _ => return Err(bad("missing checkpoint header".into())),
        }
        let mut seed = None;
        let mut input = None;
        let mut classes = None;
        let mut layers = Vec::new();
        let mut params = None;
        for (n, line) in lines.by_ref() {
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("line {}: `{line}`", n + 1)))?;
            let parse_err = |what: &str| bad(format!("line {}: bad {what}", n + 1));
            match key {
                "seed" => seed = Some(rest.parse::<u64>().map_err(|_| parse_err("seed"))?),
                "classes" => classes = Some(rest.parse::<usize>().map_err(|_| parse_err("class count"))?),
                "input" => {
                    let d: Vec<usize> = rest
                        .split_whitespace()
                        .map(|t| t.parse().map_err(|_| parse_err("input shape")))
                        .collect::<Result<_>>()?;
                    if d.len() != 3 {
                        return Err(parse_err("input shape"));
                    }
                    input = Some(Shape::new(d[0], d[1], d[2]));
                }
                "layer" => layers.push(rest.parse::<LayerSpec>().map_err(|e| bad(format!("line {}: {e}", n + 1)))?),
                "params" => {
                    params = Some(rest.parse::<usize>().map_err(|_| parse_err("parameter count"))?);
                    break;
                }
                _ => return Err(bad(format!("line {}: unknown key `{key}`", n + 1))),
            }
        }
        let count = params.ok_or_else(|| bad("missing `params` line".into()))?;
        let values: Vec<f64> = lines
            .map(|(n, l)| l.trim().parse::<f64>().map_err(|_| bad(format!("line {}: bad parameter", n + 1))))
            .collect::<Result<_>>()?;
        if values.len() != count {
            return Err(bad(format!("expected {count} parameters, found {}", values.len())));
        }
        let spec = NetworkSpec {
            input: input.ok_or_else(|| bad("missing `input` line".into()))?,
            layers,
            classes: classes.ok_or_else(|| bad("missing `classes` line".into()))?,
        };
        let seed = seed.ok_or_else(|| bad("missing `seed` line".into()))?;
        Network::from_params(spec, seed, values).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text, path)
    }
}
