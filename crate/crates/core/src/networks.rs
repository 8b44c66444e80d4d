//! MLP, KAN and Fourier-KAN models.
//!
//! Every family takes raw terminal voltages, divides them by
//! [`NetworkSpec::input_range`] so the sweep lands on `[0, 1]`, and emits
//! one raw output `y` that [`Conversion`] maps to a physical quantity.
//!
//! Parameters flatten into one vector in a fixed order (layer by layer;
//! within a KAN layer edge by edge, output-major, then node biases). The
//! tape built by [`Network::build_tape`] registers its leaves in exactly
//! that order, so optimisers can move between the two freely.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::device::{Target, V_MAX};
use crate::diffengine::{NodeId, Tape, UnaryOp};
use crate::functions::BasicFunction;
use crate::scalar::Scalar;
use crate::splines::{KnotVector, SplineActivation, SplineError};

pub const CHECKPOINT_VERSION: &str = "kanc-v1";

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("input has length {got}, expected a multiple of {width}")]
    InputShape { width: usize, got: usize },
    #[error("operation needs a {needed} network")]
    Kind { needed: &'static str },
    #[error("unknown edge {0:?}")]
    UnknownEdge(EdgeId),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("checkpoint version '{0}' not supported")]
    Version(String),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    Mlp,
    Kan,
    Fkan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conversion {
    /// `I_D = exp(y)`, amperes.
    ExpCurrent,
    /// `Q = y`, in 1e-18 F.
    ChargeScale,
}

impl Conversion {
    pub fn for_target(target: Target) -> Self {
        if target.is_charge() {
            Conversion::ChargeScale
        } else {
            Conversion::ExpCurrent
        }
    }

    /// Network output to the dataset's units (amperes or 1e-18 F).
    pub fn apply<T: Scalar>(self, y: T) -> T {
        match self {
            Conversion::ExpCurrent => y.exp(),
            Conversion::ChargeScale => y,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpActivation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: MlpActivation,
    /// KAN spline order `k`.
    #[serde(default)]
    pub spline_order: usize,
    /// Grid size per layer: spline cells (KAN) or harmonics (FKAN).
    #[serde(default)]
    pub grids: Vec<usize>,
    pub conversion: Conversion,
    /// Voltage mapped to 1.0 at the network input.
    pub input_range: f64,
}

impl NetworkSpec {
    pub fn mlp(widths: Vec<usize>, conversion: Conversion) -> Self {
        Self {
            kind: NetworkKind::Mlp,
            widths,
            activation: MlpActivation::Tanh,
            spline_order: 0,
            grids: Vec::new(),
            conversion,
            input_range: V_MAX,
        }
    }

    pub fn kan(widths: Vec<usize>, order: usize, grid: usize, conversion: Conversion) -> Self {
        let layers = widths.len().saturating_sub(1);
        Self {
            kind: NetworkKind::Kan,
            widths,
            activation: MlpActivation::Tanh,
            spline_order: order,
            grids: vec![grid; layers],
            conversion,
            input_range: V_MAX,
        }
    }

    pub fn fkan(widths: Vec<usize>, grids: Vec<usize>, conversion: Conversion) -> Self {
        Self {
            kind: NetworkKind::Fkan,
            widths,
            activation: MlpActivation::Tanh,
            spline_order: 0,
            grids,
            conversion,
            input_range: V_MAX,
        }
    }

    pub fn with_input_range(mut self, range: f64) -> Self {
        self.input_range = range;
        self
    }

    pub fn mlp1(target: Target) -> Self {
        Self::mlp(vec![2, 16, 16, 1], Conversion::for_target(target))
    }

    pub fn mlp2(target: Target) -> Self {
        Self::mlp(vec![2, 16, 16, 16, 1], Conversion::for_target(target))
    }

    /// Charge networks drop the trailing single-edge layer.
    pub fn kan1(target: Target) -> Self {
        let widths = if target.is_charge() {
            vec![2, 3, 1]
        } else {
            vec![2, 3, 1, 1]
        };
        Self::kan(widths, 3, 16, Conversion::for_target(target))
    }

    pub fn kan2(target: Target) -> Self {
        let widths = if target.is_charge() {
            vec![2, 3, 3, 1]
        } else {
            vec![2, 3, 3, 1, 1]
        };
        Self::kan(widths, 3, 16, Conversion::for_target(target))
    }

    /// The 18-edge `[2, 6, 1]` network used for iterative symbolic fitting.
    pub fn kan_symbolic(target: Target) -> Self {
        Self::kan(vec![2, 6, 1], 3, 16, Conversion::for_target(target))
    }

    pub fn fkan1(target: Target) -> Self {
        Self::fkan(vec![2, 8, 1], vec![8, 8], Conversion::for_target(target))
    }

    /// Hidden-to-hidden layer uses 2 harmonics, outer layers 8.
    pub fn fkan2(target: Target) -> Self {
        Self::fkan(
            vec![2, 8, 8, 1],
            vec![8, 2, 8],
            Conversion::for_target(target),
        )
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::Spec(m));
        if self.widths.len() < 2 {
            return bad("need at least input and output widths".into());
        }
        if self.widths.contains(&0) {
            return bad("zero-width layer".into());
        }
        if *self.widths.last().unwrap() != 1 {
            return bad("output width must be 1".into());
        }
        if !(self.input_range.is_finite() && self.input_range > 0.0) {
            return bad(format!("input range {} must be positive", self.input_range));
        }
        match self.kind {
            NetworkKind::Mlp => {}
            NetworkKind::Kan | NetworkKind::Fkan => {
                if self.grids.len() != self.num_layers() {
                    return bad(format!(
                        "{} grid sizes for {} layers",
                        self.grids.len(),
                        self.num_layers()
                    ));
                }
                if self.grids.contains(&0) {
                    return bad("grid size must be positive".into());
                }
                if self.kind == NetworkKind::Kan
                    && self.spline_order > crate::splines::MAX_SPLINE_ORDER
                {
                    return bad(format!("spline order {} too large", self.spline_order));
                }
            }
        }
        Ok(())
    }

    /// Device networks map `(V_D, V_G)` to one output.
    pub fn validate_device(&self) -> Result<(), NetworkError> {
        self.validate()?;
        if self.widths[0] != 2 {
            return Err(NetworkError::Spec(
                "device networks take exactly 2 inputs".into(),
            ));
        }
        Ok(())
    }

    /// Learnable parameter count. KAN edges count `G + k` coefficients plus
    /// `w_b` and `w_s`; every KAN node carries a bias.
    pub fn param_count(&self) -> usize {
        let pairs = self.widths.windows(2).enumerate();
        match self.kind {
            NetworkKind::Mlp => pairs.map(|(_, w)| w[0] * w[1] + w[1]).sum(),
            NetworkKind::Kan => pairs
                .map(|(l, w)| w[0] * w[1] * (self.grids[l] + self.spline_order + 2) + w[1])
                .sum(),
            NetworkKind::Fkan => pairs
                .map(|(l, w)| 2 * self.grids[l] * w[0] * w[1] + w[1])
                .sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeId {
    pub layer: usize,
    /// Source node in `layer`.
    pub input: usize,
    /// Destination node in `layer + 1`.
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DenseLayer<T: Scalar> {
    pub in_width: usize,
    pub out_width: usize,
    /// Row-major `in_width x out_width`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn weight(&self, input: usize, output: usize) -> T {
        self.weights[input * self.out_width + output]
    }
}

/// Edge snapped to `c f(a x + b) + d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SymbolicEdge<T: Scalar> {
    pub function: BasicFunction,
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
}

impl<T: Scalar> SymbolicEdge<T> {
    pub fn eval(&self, x: T) -> T {
        self.c * self.function.eval(self.a * x + self.b) + self.d
    }

    pub fn deriv(&self, x: T) -> T {
        self.c * self.a * self.function.deriv(self.a * x + self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", rename_all = "lowercase")]
pub enum KanEdge<T: Scalar> {
    Spline(SplineActivation<T>),
    Symbolic(SymbolicEdge<T>),
}

impl<T: Scalar> KanEdge<T> {
    pub fn eval(&self, x: T) -> T {
        match self {
            KanEdge::Spline(s) => s.eval(x),
            KanEdge::Symbolic(s) => s.eval(x),
        }
    }

    pub fn deriv(&self, x: T) -> T {
        match self {
            KanEdge::Spline(s) => s.deriv(x),
            KanEdge::Symbolic(s) => s.deriv(x),
        }
    }

    pub fn is_symbolic(&self) -> bool {
        matches!(self, KanEdge::Symbolic(_))
    }

    fn param_len(&self) -> usize {
        match self {
            KanEdge::Spline(s) => s.coeffs.len() + 2,
            KanEdge::Symbolic(_) => 4,
        }
    }
}

/// One matrix of edge functions plus a bias per destination node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct KanLayer<T: Scalar> {
    pub in_width: usize,
    pub out_width: usize,
    /// `edges[output * in_width + input]`.
    pub edges: Vec<KanEdge<T>>,
    pub bias: Vec<T>,
}

impl<T: Scalar> KanLayer<T> {
    pub fn edge(&self, input: usize, output: usize) -> &KanEdge<T> {
        &self.edges[output * self.in_width + input]
    }

    pub fn edge_mut(&mut self, input: usize, output: usize) -> &mut KanEdge<T> {
        &mut self.edges[output * self.in_width + input]
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        (0..self.out_width)
            .map(|j| {
                let mut s = self.bias[j];
                for (i, &xi) in x.iter().enumerate() {
                    s += self.edge(i, j).eval(xi);
                }
                s
            })
            .collect()
    }
}

/// Truncated Fourier series per (input, output) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FourierLayer<T: Scalar> {
    pub in_width: usize,
    pub out_width: usize,
    pub grid: usize,
    /// `(2 in_width grid) x out_width`, row `2 (i grid + k - 1)` holding the
    /// cosine coefficients `a_ik` and the row after it the sine ones `b_ik`.
    pub coeffs: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> FourierLayer<T> {
    pub fn a(&self, output: usize, input: usize, k: usize) -> T {
        self.coeffs[2 * (input * self.grid + k - 1) * self.out_width + output]
    }

    pub fn b(&self, output: usize, input: usize, k: usize) -> T {
        self.coeffs[(2 * (input * self.grid + k - 1) + 1) * self.out_width + output]
    }

    pub fn set(&mut self, output: usize, input: usize, k: usize, a: T, b: T) {
        let row = 2 * (input * self.grid + k - 1);
        self.coeffs[row * self.out_width + output] = a;
        self.coeffs[(row + 1) * self.out_width + output] = b;
    }

    /// Contribution of `input` to `output`: `sum_k a cos(k x) + b sin(k x)`.
    pub fn edge(&self, output: usize, input: usize, x: T) -> T {
        let mut s = T::zero();
        for k in 1..=self.grid {
            let kx = T::from_usize_lossy(k) * x;
            s += self.a(output, input, k) * kx.cos() + self.b(output, input, k) * kx.sin();
        }
        s
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        (0..self.out_width)
            .map(|j| {
                let mut s = self.bias[j];
                for (i, &xi) in x.iter().enumerate() {
                    s += self.edge(j, i, xi);
                }
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", rename_all = "lowercase")]
pub enum Layers<T: Scalar> {
    Mlp(Vec<DenseLayer<T>>),
    Kan(Vec<KanLayer<T>>),
    Fkan(Vec<FourierLayer<T>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Network<T: Scalar> {
    pub spec: NetworkSpec,
    pub layers: Layers<T>,
}

/// Per-layer edge scores (`[layer][output][input]`) and per-level node
/// scores (`[level][node]`, level 0 being the inputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub edges: Vec<Vec<Vec<f64>>>,
    pub nodes: Vec<Vec<f64>>,
}

impl<T: Scalar> Network<T> {
    /// Random initialisation: uniform Glorot weights for MLPs, `N(0, 0.1)`
    /// spline coefficients with unit base weights for KANs, and
    /// `N(0, 1/(d sqrt G))` Fourier coefficients. Biases start at zero.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self, NetworkError> {
        spec.validate()?;
        let pairs: Vec<(usize, usize)> = spec.widths.windows(2).map(|w| (w[0], w[1])).collect();
        let layers = match spec.kind {
            NetworkKind::Mlp => Layers::Mlp(
                pairs
                    .iter()
                    .map(|&(i, o)| {
                        let lim = (6.0 / (i + o) as f64).sqrt();
                        let dist = Uniform::new_inclusive(-lim, lim).expect("finite bound");
                        DenseLayer {
                            in_width: i,
                            out_width: o,
                            weights: (0..i * o).map(|_| T::lit(dist.sample(rng))).collect(),
                            bias: vec![T::zero(); o],
                        }
                    })
                    .collect(),
            ),
            NetworkKind::Kan => {
                let normal = Normal::new(0.0, 0.1).expect("valid sigma");
                let mut out = Vec::with_capacity(pairs.len());
                for (l, &(i, o)) in pairs.iter().enumerate() {
                    let knots = KnotVector::unit(spec.grids[l], spec.spline_order)?;
                    let mut edges = Vec::with_capacity(i * o);
                    for _ in 0..i * o {
                        let coeffs = (0..knots.num_basis())
                            .map(|_| T::lit(normal.sample(rng)))
                            .collect();
                        edges.push(KanEdge::Spline(SplineActivation::new(
                            knots.clone(),
                            coeffs,
                            T::one(),
                            T::one(),
                        )?));
                    }
                    out.push(KanLayer {
                        in_width: i,
                        out_width: o,
                        edges,
                        bias: vec![T::zero(); o],
                    });
                }
                Layers::Kan(out)
            }
            NetworkKind::Fkan => Layers::Fkan(
                pairs
                    .iter()
                    .enumerate()
                    .map(|(l, &(i, o))| {
                        let g = spec.grids[l];
                        let sigma = 1.0 / (i as f64 * (g as f64).sqrt());
                        let normal = Normal::new(0.0, sigma).expect("valid sigma");
                        FourierLayer {
                            in_width: i,
                            out_width: o,
                            grid: g,
                            coeffs: (0..2 * i * g * o)
                                .map(|_| T::lit(normal.sample(rng)))
                                .collect(),
                            bias: vec![T::zero(); o],
                        }
                    })
                    .collect(),
            ),
        };
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn kind(&self) -> NetworkKind {
        self.spec.kind
    }

    pub fn input_width(&self) -> usize {
        self.spec.widths[0]
    }

    fn normalise(&self, v: T) -> T {
        v / T::lit(self.spec.input_range)
    }

    /// Raw output `y` for one input point given in volts.
    pub fn forward(&self, input: &[T]) -> T {
        let mut h: Vec<T> = input.iter().map(|&v| self.normalise(v)).collect();
        match &self.layers {
            Layers::Mlp(layers) => {
                let last = layers.len() - 1;
                for (l, layer) in layers.iter().enumerate() {
                    let mut next = layer.bias.clone();
                    for (i, &hi) in h.iter().enumerate() {
                        for (o, n) in next.iter_mut().enumerate() {
                            *n += hi * layer.weight(i, o);
                        }
                    }
                    if l != last {
                        next.iter_mut().for_each(|v| *v = v.tanh());
                    }
                    h = next;
                }
            }
            Layers::Kan(layers) => {
                for layer in layers {
                    h = layer.forward(&h);
                }
            }
            Layers::Fkan(layers) => {
                for layer in layers {
                    h = layer.forward(&h);
                }
            }
        }
        h[0]
    }

    /// Raw outputs for row-major `inputs` of shape `n x input_width`.
    pub fn forward_batch(&self, inputs: &[T]) -> Result<Vec<T>, NetworkError> {
        let w = self.input_width();
        if !inputs.len().is_multiple_of(w) {
            return Err(NetworkError::InputShape {
                width: w,
                got: inputs.len(),
            });
        }
        Ok(inputs.chunks(w).map(|x| self.forward(x)).collect())
    }

    /// Node values at every level (inputs already normalised) for one point.
    pub fn activations(&self, input: &[T]) -> Vec<Vec<T>> {
        let mut h: Vec<T> = input.iter().map(|&v| self.normalise(v)).collect();
        let mut out = vec![h.clone()];
        match &self.layers {
            Layers::Mlp(layers) => {
                let last = layers.len() - 1;
                for (l, layer) in layers.iter().enumerate() {
                    let mut next = layer.bias.clone();
                    for (i, &hi) in h.iter().enumerate() {
                        for (o, n) in next.iter_mut().enumerate() {
                            *n += hi * layer.weight(i, o);
                        }
                    }
                    if l != last {
                        next.iter_mut().for_each(|v| *v = v.tanh());
                    }
                    h = next;
                    out.push(h.clone());
                }
            }
            Layers::Kan(layers) => {
                for layer in layers {
                    h = layer.forward(&h);
                    out.push(h.clone());
                }
            }
            Layers::Fkan(layers) => {
                for layer in layers {
                    h = layer.forward(&h);
                    out.push(h.clone());
                }
            }
        }
        out
    }

    /// Output of one edge given the value at its source node.
    pub fn edge_output(&self, edge: EdgeId, x: T) -> Result<T, NetworkError> {
        self.check_edge(edge)?;
        Ok(match &self.layers {
            Layers::Mlp(layers) => layers[edge.layer].weight(edge.input, edge.output) * x,
            Layers::Kan(layers) => layers[edge.layer].edge(edge.input, edge.output).eval(x),
            Layers::Fkan(layers) => layers[edge.layer].edge(edge.output, edge.input, x),
        })
    }

    pub fn check_edge(&self, edge: EdgeId) -> Result<(), NetworkError> {
        let w = &self.spec.widths;
        if edge.layer + 1 >= w.len()
            || edge.input >= w[edge.layer]
            || edge.output >= w[edge.layer + 1]
        {
            return Err(NetworkError::UnknownEdge(edge));
        }
        Ok(())
    }

    /// All edges, layer by layer, output-major within a layer.
    pub fn edge_ids(&self) -> Vec<EdgeId> {
        let mut ids = Vec::new();
        for (layer, w) in self.spec.widths.windows(2).enumerate() {
            for output in 0..w[1] {
                for input in 0..w[0] {
                    ids.push(EdgeId {
                        layer,
                        input,
                        output,
                    });
                }
            }
        }
        ids
    }

    pub fn num_params(&self) -> usize {
        match &self.layers {
            Layers::Mlp(ls) => ls.iter().map(|l| l.weights.len() + l.bias.len()).sum(),
            Layers::Kan(ls) => ls
                .iter()
                .map(|l| l.edges.iter().map(KanEdge::param_len).sum::<usize>() + l.bias.len())
                .sum(),
            Layers::Fkan(ls) => ls.iter().map(|l| l.coeffs.len() + l.bias.len()).sum(),
        }
    }

    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        match &self.layers {
            Layers::Mlp(ls) => {
                for l in ls {
                    out.extend_from_slice(&l.weights);
                    out.extend_from_slice(&l.bias);
                }
            }
            Layers::Kan(ls) => {
                for l in ls {
                    for e in &l.edges {
                        match e {
                            KanEdge::Spline(s) => {
                                out.extend_from_slice(&s.coeffs);
                                out.push(s.w_b);
                                out.push(s.w_s);
                            }
                            KanEdge::Symbolic(s) => out.extend_from_slice(&[s.a, s.b, s.c, s.d]),
                        }
                    }
                    out.extend_from_slice(&l.bias);
                }
            }
            Layers::Fkan(ls) => {
                for l in ls {
                    out.extend_from_slice(&l.coeffs);
                    out.extend_from_slice(&l.bias);
                }
            }
        }
        out
    }

    pub fn set_params(&mut self, p: &[T]) -> Result<(), NetworkError> {
        let expected = self.num_params();
        if p.len() != expected {
            return Err(NetworkError::ParamLength {
                expected,
                got: p.len(),
            });
        }
        let mut at = 0;
        let mut take = |dst: &mut [T]| {
            dst.copy_from_slice(&p[at..at + dst.len()]);
            at += dst.len();
        };
        match &mut self.layers {
            Layers::Mlp(ls) => {
                for l in ls {
                    take(&mut l.weights);
                    take(&mut l.bias);
                }
            }
            Layers::Kan(ls) => {
                for l in ls {
                    for e in &mut l.edges {
                        match e {
                            KanEdge::Spline(s) => {
                                take(&mut s.coeffs);
                                let mut w = [T::zero(); 2];
                                take(&mut w);
                                s.w_b = w[0];
                                s.w_s = w[1];
                            }
                            KanEdge::Symbolic(s) => {
                                let mut v = [T::zero(); 4];
                                take(&mut v);
                                (s.a, s.b, s.c, s.d) = (v[0], v[1], v[2], v[3]);
                            }
                        }
                    }
                    take(&mut l.bias);
                }
            }
            Layers::Fkan(ls) => {
                for l in ls {
                    take(&mut l.coeffs);
                    take(&mut l.bias);
                }
            }
        }
        Ok(())
    }

    /// Records the forward pass on `tape` for the `n x input_width` node
    /// `input` (volts) and returns the `n x 1` raw output node. Leaves are
    /// appended in [`Network::params`] order.
    pub fn build_tape(&self, tape: &mut Tape<T>, input: NodeId) -> NodeId {
        let x = tape.scale(input, T::one() / T::lit(self.spec.input_range));
        match &self.layers {
            Layers::Mlp(ls) => {
                let mut h = x;
                let last = ls.len() - 1;
                for (l, layer) in ls.iter().enumerate() {
                    let w = tape.leaf(layer.in_width, layer.out_width, &layer.weights);
                    let b = tape.leaf(1, layer.out_width, &layer.bias);
                    let z = tape.matmul(h, w);
                    let zb = tape.add(z, b);
                    h = if l == last {
                        zb
                    } else {
                        tape.unary(zb, UnaryOp::Tanh)
                    };
                }
                h
            }
            Layers::Fkan(ls) => {
                let mut h = x;
                for layer in ls {
                    let feats = tape.fourier(h, layer.grid);
                    let w = tape.leaf(
                        2 * layer.in_width * layer.grid,
                        layer.out_width,
                        &layer.coeffs,
                    );
                    let b = tape.leaf(1, layer.out_width, &layer.bias);
                    let z = tape.matmul(feats, w);
                    h = tape.add(z, b);
                }
                h
            }
            Layers::Kan(ls) => {
                let mut cols: Vec<NodeId> =
                    (0..self.input_width()).map(|i| tape.column(x, i)).collect();
                for layer in ls {
                    let silus: Vec<Option<NodeId>> = (0..layer.in_width)
                        .map(|i| {
                            let needed =
                                (0..layer.out_width).any(|j| !layer.edge(i, j).is_symbolic());
                            needed.then(|| tape.unary(cols[i], UnaryOp::Silu))
                        })
                        .collect();
                    let mut sums: Vec<Option<NodeId>> = vec![None; layer.out_width];
                    for j in 0..layer.out_width {
                        for i in 0..layer.in_width {
                            let out = match layer.edge(i, j) {
                                KanEdge::Spline(s) => {
                                    let c = tape.leaf(1, s.coeffs.len(), &s.coeffs);
                                    let wb = tape.scalar_leaf(s.w_b);
                                    let ws = tape.scalar_leaf(s.w_s);
                                    let sp = tape.spline(cols[i], c, Arc::new(s.knots.clone()));
                                    let base = tape.mul(silus[i].expect("silu recorded"), wb);
                                    let spl = tape.mul(sp, ws);
                                    tape.add(base, spl)
                                }
                                KanEdge::Symbolic(s) => symbolic_on_tape(tape, cols[i], s),
                            };
                            sums[j] = Some(match sums[j] {
                                Some(acc) => tape.add(acc, out),
                                None => out,
                            });
                        }
                    }
                    let bias = tape.leaf(1, layer.out_width, &layer.bias);
                    cols = sums
                        .into_iter()
                        .enumerate()
                        .map(|(j, s)| {
                            let bj = tape.column(bias, j);
                            tape.add(s.expect("non-empty layer"), bj)
                        })
                        .collect();
                }
                cols[0]
            }
        }
    }

    /// Re-grids every spline edge of a KAN to `grid` cells.
    pub fn refine(&self, grid: usize) -> Result<Self, NetworkError> {
        self.refine_on(grid, &[])
    }

    /// Re-grids every spline edge, fitting each new spline on its domain and
    /// on the values its source node takes at `inputs` (row-major points).
    pub fn refine_on(&self, grid: usize, inputs: &[T]) -> Result<Self, NetworkError> {
        let Layers::Kan(ls) = &self.layers else {
            return Err(NetworkError::Kind { needed: "KAN" });
        };
        let w = self.input_width();
        if !inputs.len().is_multiple_of(w) {
            return Err(NetworkError::InputShape {
                width: w,
                got: inputs.len(),
            });
        }
        let acts: Vec<Vec<Vec<T>>> = inputs.chunks(w).map(|x| self.activations(x)).collect();
        let mut layers = Vec::with_capacity(ls.len());
        for (li, l) in ls.iter().enumerate() {
            let seen: Vec<Vec<T>> = (0..l.in_width)
                .map(|i| acts.iter().map(|a| a[li][i]).collect())
                .collect();
            let mut edges = Vec::with_capacity(l.edges.len());
            for (e, edge) in l.edges.iter().enumerate() {
                edges.push(match edge {
                    KanEdge::Spline(s) => {
                        KanEdge::Spline(s.refine_with(grid, &seen[e % l.in_width])?)
                    }
                    KanEdge::Symbolic(s) => KanEdge::Symbolic(s.clone()),
                });
            }
            layers.push(KanLayer {
                in_width: l.in_width,
                out_width: l.out_width,
                edges,
                bias: l.bias.clone(),
            });
        }
        let mut spec = self.spec.clone();
        spec.grids = vec![grid; spec.num_layers()];
        Ok(Self {
            spec,
            layers: Layers::Kan(layers),
        })
    }

    /// Edge scores are the standard deviation of each edge's output over the
    /// given points, divided by the largest score in the same layer. A node
    /// scores the maximum over its outgoing edges; output nodes score 1.
    pub fn attribution(&self, inputs: &[T]) -> Result<Attribution, NetworkError> {
        let w = self.input_width();
        if inputs.is_empty() {
            return Err(NetworkError::EmptyDataset);
        }
        if !inputs.len().is_multiple_of(w) {
            return Err(NetworkError::InputShape {
                width: w,
                got: inputs.len(),
            });
        }
        let acts: Vec<Vec<Vec<T>>> = inputs.chunks(w).map(|x| self.activations(x)).collect();
        let n = acts.len() as f64;
        let widths = &self.spec.widths;
        let mut edges = Vec::with_capacity(widths.len() - 1);
        for layer in 0..widths.len() - 1 {
            let mut scores = vec![vec![0.0; widths[layer]]; widths[layer + 1]];
            for (output, row) in scores.iter_mut().enumerate() {
                for (input, score) in row.iter_mut().enumerate() {
                    let id = EdgeId {
                        layer,
                        input,
                        output,
                    };
                    let vals: Vec<f64> = acts
                        .iter()
                        .map(|a| {
                            self.edge_output(id, a[layer][input])
                                .map(|v| v.to_f64_lossy())
                        })
                        .collect::<Result<_, _>>()?;
                    let mean = vals.iter().sum::<f64>() / n;
                    *score = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                }
            }
            let max = scores.iter().flatten().fold(0.0f64, |m, v| m.max(*v));
            if max > 0.0 {
                scores.iter_mut().flatten().for_each(|v| *v /= max);
            }
            edges.push(scores);
        }
        let mut nodes = Vec::with_capacity(widths.len());
        for (level, &width) in widths.iter().enumerate() {
            if level + 1 == widths.len() {
                nodes.push(vec![1.0; width]);
            } else {
                nodes.push(
                    (0..width)
                        .map(|i| edges[level].iter().map(|row| row[i]).fold(0.0, f64::max))
                        .collect(),
                );
            }
        }
        Ok(Attribution { edges, nodes })
    }
}

fn symbolic_on_tape<T: Scalar>(tape: &mut Tape<T>, x: NodeId, s: &SymbolicEdge<T>) -> NodeId {
    let a = tape.scalar_leaf(s.a);
    let b = tape.scalar_leaf(s.b);
    let c = tape.scalar_leaf(s.c);
    let d = tape.scalar_leaf(s.d);
    let ax = tape.mul(x, a);
    let u = tape.add(ax, b);
    let f = basic_on_tape(tape, u, s.function);
    let cf = tape.mul(f, c);
    tape.add(cf, d)
}

/// Records `f(u)` for a library function.
pub fn basic_on_tape<T: Scalar>(tape: &mut Tape<T>, u: NodeId, f: BasicFunction) -> NodeId {
    match f {
        BasicFunction::X => u,
        BasicFunction::X2 => tape.powi(u, 2),
        BasicFunction::X3 => tape.powi(u, 3),
        BasicFunction::Inv => tape.powi(u, -1),
        BasicFunction::Inv2 => tape.powi(u, -2),
        BasicFunction::Exp => tape.unary(u, UnaryOp::Exp),
        BasicFunction::Ln => tape.unary(u, UnaryOp::Ln),
        BasicFunction::Sin => tape.unary(u, UnaryOp::Sin),
        BasicFunction::Cos => tape.unary(u, UnaryOp::Cos),
        BasicFunction::Tan => tape.unary(u, UnaryOp::Tan),
        BasicFunction::Tanh => tape.unary(u, UnaryOp::Tanh),
        BasicFunction::Atan => tape.unary(u, UnaryOp::Atan),
        BasicFunction::Abs => tape.unary(u, UnaryOp::Abs),
        BasicFunction::Sqrt => tape.unary(u, UnaryOp::Sqrt),
    }
}

/// Provenance stored next to the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub target: Option<Target>,
    pub step_mv: Option<u32>,
    #[serde(default)]
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub network: Network<f64>,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn new(network: Network<f64>, meta: TrainMeta) -> Self {
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            network,
            meta,
        }
    }

    pub fn to_json(&self) -> Result<String, NetworkError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(NetworkError::Version(ck.version));
        }
        ck.network.spec.validate()?;
        if ck.network.num_params() == 0 {
            return Err(NetworkError::Spec("checkpoint has no parameters".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn table_parameter_counts() {
        assert_eq!(NetworkSpec::mlp1(Target::Id).param_count(), 337);
        assert_eq!(NetworkSpec::mlp2(Target::Id).param_count(), 609);
        assert_eq!(NetworkSpec::fkan1(Target::Id).param_count(), 393);
        assert_eq!(NetworkSpec::fkan2(Target::Id).param_count(), 657);
        // own KAN convention: 21 per edge at G=16, k=3, plus a bias per node
        assert_eq!(NetworkSpec::kan1(Target::Id).param_count(), 215);
        assert_eq!(
            NetworkSpec::kan1(Target::Qs).param_count(),
            2 * 3 * 21 + 3 + 3 * 21 + 1
        );
    }

    #[test]
    fn counts_match_materialised_parameters() {
        for spec in [
            NetworkSpec::mlp1(Target::Qs),
            NetworkSpec::mlp2(Target::Id),
            NetworkSpec::kan1(Target::Id),
            NetworkSpec::kan2(Target::Qd),
            NetworkSpec::kan_symbolic(Target::Qs),
            NetworkSpec::fkan1(Target::Id),
            NetworkSpec::fkan2(Target::Qs),
        ] {
            let net = Network::<f64>::init(&spec, &mut rng(1)).unwrap();
            assert_eq!(net.num_params(), spec.param_count(), "{spec:?}");
            assert_eq!(net.params().len(), spec.param_count());
        }
    }

    #[test]
    fn kart_shape_layer_counts() {
        for n in 1..5 {
            let spec = NetworkSpec::kan(vec![n, 2 * n + 1, 1], 3, 5, Conversion::ChargeScale);
            let net = Network::<f64>::init(&spec, &mut rng(0)).unwrap();
            let Layers::Kan(ls) = &net.layers else {
                unreachable!()
            };
            assert_eq!(ls.len(), 2);
            assert_eq!(ls[0].edges.len(), n * (2 * n + 1));
            assert_eq!(ls[1].edges.len(), 2 * n + 1);
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = NetworkSpec::mlp1(Target::Id);
        s.widths = vec![2, 4, 2];
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::kan1(Target::Qs);
        s.grids.pop();
        assert!(s.validate().is_err());
        let s = NetworkSpec::mlp(vec![3, 1], Conversion::ChargeScale);
        assert!(s.validate().is_ok());
        assert!(s.validate_device().is_err());
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        for spec in [
            NetworkSpec::mlp1(Target::Qs),
            NetworkSpec::fkan1(Target::Qs),
            NetworkSpec::kan1(Target::Qs),
        ] {
            let mut net = Network::<f64>::init(&spec, &mut rng(3)).unwrap();
            let zeros = vec![0.0; net.num_params()];
            net.set_params(&zeros).unwrap();
            assert_eq!(net.forward(&[0.3, 0.7]), 0.0);
        }
    }

    #[test]
    fn single_linear_map() {
        let spec = NetworkSpec::mlp(vec![2, 1], Conversion::ChargeScale).with_input_range(1.0);
        let mut net = Network::<f64>::init(&spec, &mut rng(0)).unwrap();
        net.set_params(&[1.0, 1.0, 0.0]).unwrap();
        assert!((net.forward(&[0.3, 0.4]) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn single_edge_kan_is_silu() {
        let spec =
            NetworkSpec::kan(vec![1, 1], 3, 4, Conversion::ChargeScale).with_input_range(1.0);
        let mut net = Network::<f64>::init(&spec, &mut rng(0)).unwrap();
        if let Layers::Kan(ls) = &mut net.layers {
            if let KanEdge::Spline(s) = &mut ls[0].edges[0] {
                s.w_b = 1.0;
                s.w_s = 0.0;
            }
        }
        assert_eq!(net.forward(&[0.0]), 0.0);
        assert!((net.forward(&[0.6]) - crate::scalar::silu(0.6)).abs() < 1e-15);
    }

    #[test]
    fn single_harmonic_fkan() {
        let spec =
            NetworkSpec::fkan(vec![1, 1], vec![1], Conversion::ChargeScale).with_input_range(1.0);
        let mut net = Network::<f64>::init(&spec, &mut rng(0)).unwrap();
        if let Layers::Fkan(ls) = &mut net.layers {
            ls[0].set(0, 0, 1, 1.0, 0.0);
            ls[0].bias[0] = 0.0;
        }
        assert_eq!(net.forward(&[0.0]), 1.0);
    }

    #[test]
    fn tape_matches_direct_forward_and_params_round_trip() {
        for spec in [
            NetworkSpec::mlp2(Target::Id),
            NetworkSpec::kan2(Target::Id),
            NetworkSpec::fkan2(Target::Qd),
        ] {
            let net = Network::<f64>::init(&spec, &mut rng(7)).unwrap();
            let pts: Vec<f64> = (0..20)
                .flat_map(|i| [0.04 * i as f64, 0.82 - 0.03 * i as f64])
                .collect();
            let mut tape = Tape::new();
            let x = tape.constant(20, 2, pts.clone());
            let y = net.build_tape(&mut tape, x);
            assert_eq!(tape.leaf_values(), net.params());
            let direct = net.forward_batch(&pts).unwrap();
            for (a, b) in tape.value(y).iter().zip(&direct) {
                assert!(
                    (a - b).abs() <= 1e-12 * (1.0 + b.abs()),
                    "{:?}: {a} vs {b}",
                    spec.kind
                );
            }
            let mut copy = net.clone();
            let p: Vec<f64> = net.params().iter().map(|v| v * 0.5).collect();
            copy.set_params(&p).unwrap();
            assert_eq!(copy.params(), p);
            assert!(copy.set_params(&p[1..]).is_err());
        }
    }

    #[test]
    fn refinement_preserves_network_on_nested_grids() {
        let spec = NetworkSpec::kan(vec![2, 3, 1], 3, 2, Conversion::ChargeScale);
        let net = Network::<f64>::init(&spec, &mut rng(4)).unwrap();
        let fine = net.refine(4).unwrap().refine(8).unwrap();
        assert_eq!(fine.spec.grids, vec![8, 8]);
        for i in 0..50 {
            let x = [
                0.82 * (i as f64 / 49.0),
                0.82 * ((i * 7 % 50) as f64 / 49.0),
            ];
            assert!((fine.forward(&x) - net.forward(&x)).abs() < 1e-8);
        }
        let mlp = Network::<f64>::init(&NetworkSpec::mlp1(Target::Qs), &mut rng(0)).unwrap();
        assert!(matches!(mlp.refine(4), Err(NetworkError::Kind { .. })));
    }

    #[test]
    fn data_aware_refinement() {
        let spec = NetworkSpec::kan(vec![2, 3, 1], 3, 8, Conversion::ChargeScale);
        let net = Network::<f64>::init(&spec, &mut rng(9)).unwrap();
        let inputs: Vec<f64> = (0..60)
            .map(|i| 0.82 * ((i * 13 % 60) as f64 / 59.0))
            .collect();
        let nested = net.refine_on(16, &inputs).unwrap();
        let coarse = net.refine_on(12, &inputs).unwrap();
        let plain = net.refine(12).unwrap();
        let worst = |m: &Network<f64>| {
            inputs
                .chunks(2)
                .map(|x| (m.forward(x) - net.forward(x)).abs())
                .fold(0.0, f64::max)
        };
        assert!(worst(&nested) < 1e-8);
        // hidden activations leave [0, 1]; fitting where they land matters
        assert!(worst(&coarse) < 0.1 * worst(&plain));
        assert!(matches!(
            net.refine_on(12, &inputs[1..]),
            Err(NetworkError::InputShape { .. })
        ));
    }

    #[test]
    fn attribution_rules() {
        let spec = NetworkSpec::kan(vec![2, 1], 3, 4, Conversion::ChargeScale);
        let mut net = Network::<f64>::init(&spec, &mut rng(2)).unwrap();
        if let Layers::Kan(ls) = &mut net.layers {
            if let KanEdge::Spline(s) = &mut ls[0].edges[0] {
                s.w_b = 0.0;
                s.w_s = 0.0;
            }
        }
        let pts: Vec<f64> = (0..30)
            .flat_map(|i| [0.02 * i as f64, 0.8 - 0.02 * i as f64])
            .collect();
        let att = net.attribution(&pts).unwrap();
        assert_eq!(att.edges[0][0][0], 0.0);
        assert_eq!(att.edges[0][0][1], 1.0);
        assert_eq!(att.nodes[0], vec![0.0, 1.0]);
        assert_eq!(att.nodes[1], vec![1.0]);

        let single = NetworkSpec::kan(vec![1, 1], 3, 4, Conversion::ChargeScale);
        let net = Network::<f64>::init(&single, &mut rng(5)).unwrap();
        let att = net.attribution(&[0.1, 0.3, 0.5]).unwrap();
        assert_eq!(att.edges[0][0][0], 1.0);
        assert!(matches!(
            net.attribution(&[]),
            Err(NetworkError::EmptyDataset)
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = Network::<f64>::init(&NetworkSpec::kan1(Target::Id), &mut rng(9)).unwrap();
        let ck = Checkpoint::new(
            net,
            TrainMeta {
                seed: 9,
                epochs: 12,
                final_loss: Some(0.123_456_789_012_345_67),
                target: Some(Target::Id),
                step_mv: Some(10),
                diverged: false,
            },
        );
        let text = ck.to_json().unwrap();
        assert!(text.contains("\"version\": \"kanc-v1\""));
        let back = Checkpoint::from_json(&text).unwrap();
        let a: Vec<u64> = ck.network.params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.network.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back, ck);
        let bad = text.replace("kanc-v1", "kanc-v0");
        assert!(matches!(
            Checkpoint::from_json(&bad),
            Err(NetworkError::Version(_))
        ));
    }

    #[test]
    fn single_precision_forward() {
        let net = Network::<f32>::init(&NetworkSpec::fkan1(Target::Qs), &mut rng(1)).unwrap();
        assert!(net.forward(&[0.2f32, 0.5]).is_finite());
    }
}
