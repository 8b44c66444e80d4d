//! Snapping learned KAN edges to closed-form functions and reading the
//! whole network back as a formula.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::device::VoltageGridDataset;
use crate::evaluate::{dataset_mape, SplitMape};
use crate::functions::{BasicFunction, LIBRARY};
use crate::networks::{Conversion, EdgeId, KanEdge, Layers, Network, NetworkError, SymbolicEdge};
use crate::training::{retrain, DeviceObjective, Objective, TrainConfig, TrainError};

/// Half-width of the initial `(a, b)` search box.
pub const SEARCH_RANGE: f64 = 10.0;
pub const SEARCH_POINTS: usize = 21;
pub const SEARCH_LEVELS: usize = 3;
/// Points sampled along each edge's observed input range.
pub const EDGE_SAMPLES: usize = 101;
/// Share of the original epoch budget spent retraining after each round.
pub const RETRAIN_FRACTION: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum SymbolicError {
    #[error("need at least 8 samples, got {0}")]
    TooFewSamples(usize),
    #[error("x and y sample counts differ ({0} vs {1})")]
    Length(usize, usize),
    #[error("non-finite sample")]
    NonFinite,
    #[error("no parameters give finite values for {0}")]
    NoFit(BasicFunction),
    #[error("edge {0:?} is already fixed")]
    AlreadyFixed(EdgeId),
    #[error("edge {0:?} is not fixed yet")]
    Unfixed(EdgeId),
    #[error("input variable {0} does not exist")]
    UnknownVariable(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] crate::evaluate::EvalError),
}

/// `c f(a x + b) + d` with its coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub function: BasicFunction,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub r2: f64,
}

impl Fit {
    pub fn eval(&self, x: f64) -> f64 {
        self.c * self.function.eval(self.a * x + self.b) + self.d
    }

    pub fn edge(&self) -> SymbolicEdge<f64> {
        SymbolicEdge {
            function: self.function,
            a: self.a,
            b: self.b,
            c: self.c,
            d: self.d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeFit {
    pub edge: EdgeId,
    pub fit: Fit,
    pub fixed: bool,
}

/// Closed-form `(c, d, R^2)` for fixed `(a, b)`.
fn solve_cd(fu: &[f64], ys: &[f64], y_mean: f64, ss_tot: f64) -> Option<(f64, f64, f64)> {
    let n = fu.len() as f64;
    let f_mean = fu.iter().sum::<f64>() / n;
    let mut sff = 0.0;
    let mut sfy = 0.0;
    for (f, y) in fu.iter().zip(ys) {
        let df = f - f_mean;
        sff += df * df;
        sfy += df * (y - y_mean);
    }
    if !(sff.is_finite() && sfy.is_finite()) {
        return None;
    }
    let (c, d) = if sff > 0.0 {
        (sfy / sff, y_mean - sfy / sff * f_mean)
    } else {
        (0.0, y_mean)
    };
    let ss_res: f64 = fu
        .iter()
        .zip(ys)
        .map(|(f, y)| (y - c * f - d).powi(2))
        .sum();
    let r2 = 1.0 - ss_res / ss_tot;
    r2.is_finite().then_some((c, d, r2))
}

/// Fits `c f(a x + b) + d` by a zooming grid search over `(a, b)` with the
/// outer pair solved by least squares at each grid node.
pub fn fit_basic(xs: &[f64], ys: &[f64], f: BasicFunction) -> Result<Fit, SymbolicError> {
    if xs.len() != ys.len() {
        return Err(SymbolicError::Length(xs.len(), ys.len()));
    }
    if xs.len() < 8 {
        return Err(SymbolicError::TooFewSamples(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(SymbolicError::NonFinite);
    }
    let n = ys.len() as f64;
    let y_mean = ys.iter().sum::<f64>() / n;
    let ss_tot: f64 = ys.iter().map(|y| (y - y_mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(Fit {
            function: f,
            a: 1.0,
            b: 0.0,
            c: 0.0,
            d: y_mean,
            r2: 1.0,
        });
    }
    let mut best: Option<Fit> = None;
    let (mut a_lo, mut a_hi) = (-SEARCH_RANGE, SEARCH_RANGE);
    let (mut b_lo, mut b_hi) = (-SEARCH_RANGE, SEARCH_RANGE);
    let mut fu = vec![0.0; xs.len()];
    let last = (SEARCH_POINTS - 1) as f64;
    for _ in 0..SEARCH_LEVELS {
        let da = (a_hi - a_lo) / last;
        let db = (b_hi - b_lo) / last;
        let mut level_best: Option<Fit> = None;
        for ia in 0..SEARCH_POINTS {
            let a = a_lo + da * ia as f64;
            for ib in 0..SEARCH_POINTS {
                let b = b_lo + db * ib as f64;
                let mut finite = true;
                for (o, &x) in fu.iter_mut().zip(xs) {
                    *o = f.eval(a * x + b);
                    finite &= o.is_finite();
                }
                if !finite {
                    continue;
                }
                if let Some((c, d, r2)) = solve_cd(&fu, ys, y_mean, ss_tot) {
                    if level_best.is_none_or(|bf| r2 > bf.r2) {
                        level_best = Some(Fit {
                            function: f,
                            a,
                            b,
                            c,
                            d,
                            r2,
                        });
                    }
                }
            }
        }
        let Some(lb) = level_best else { break };
        if best.is_none_or(|bf| lb.r2 > bf.r2) {
            best = Some(lb);
        }
        // zoom onto the neighbouring cells of the winner
        (a_lo, a_hi) = (lb.a - da, lb.a + da);
        (b_lo, b_hi) = (lb.b - db, lb.b + db);
    }
    best.ok_or(SymbolicError::NoFit(f))
}

/// Fits of every library function, best `R^2` first; ties keep library order.
pub fn suggest(
    xs: &[f64],
    ys: &[f64],
    library: &[BasicFunction],
) -> Result<Vec<Fit>, SymbolicError> {
    let mut fits = Vec::with_capacity(library.len());
    for &f in library {
        match fit_basic(xs, ys, f) {
            Ok(fit) => fits.push(fit),
            Err(SymbolicError::NoFit(_)) => {}
            Err(e) => return Err(e),
        }
    }
    fits.sort_by(|p, q| q.r2.total_cmp(&p.r2));
    Ok(fits)
}

fn kan_layers(net: &Network<f64>) -> Result<&Vec<crate::networks::KanLayer<f64>>, SymbolicError> {
    match &net.layers {
        Layers::Kan(ls) => Ok(ls),
        _ => Err(NetworkError::Kind { needed: "KAN" }.into()),
    }
}

fn kan_layers_mut(
    net: &mut Network<f64>,
) -> Result<&mut Vec<crate::networks::KanLayer<f64>>, SymbolicError> {
    match &mut net.layers {
        Layers::Kan(ls) => Ok(ls),
        _ => Err(NetworkError::Kind { needed: "KAN" }.into()),
    }
}

pub fn is_fixed(net: &Network<f64>, edge: EdgeId) -> Result<bool, SymbolicError> {
    net.check_edge(edge)?;
    Ok(kan_layers(net)?[edge.layer]
        .edge(edge.input, edge.output)
        .is_symbolic())
}

/// Edges still carrying splines, in [`Network::edge_ids`] order.
pub fn unfixed_edges(net: &Network<f64>) -> Result<Vec<EdgeId>, SymbolicError> {
    let ls = kan_layers(net)?;
    Ok(net
        .edge_ids()
        .into_iter()
        .filter(|e| !ls[e.layer].edge(e.input, e.output).is_symbolic())
        .collect())
}

/// Replaces a spline edge by `c f(a x + b) + d`; the four constants stay
/// trainable, the spline coefficients are dropped.
pub fn fix_edge(
    net: &Network<f64>,
    edge: EdgeId,
    fit: &Fit,
) -> Result<Network<f64>, SymbolicError> {
    if is_fixed(net, edge)? {
        return Err(SymbolicError::AlreadyFixed(edge));
    }
    let mut out = net.clone();
    *kan_layers_mut(&mut out)?[edge.layer].edge_mut(edge.input, edge.output) =
        KanEdge::Symbolic(fit.edge());
    Ok(out)
}

/// Samples an edge on `EDGE_SAMPLES` uniform points spanning the values its
/// source node takes over `inputs` (row-major, volts).
pub fn edge_samples(
    net: &Network<f64>,
    edge: EdgeId,
    inputs: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), SymbolicError> {
    net.check_edge(edge)?;
    let w = net.input_width();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in inputs.chunks(w) {
        let v = net.activations(x)[edge.layer][edge.input];
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return Err(NetworkError::EmptyDataset.into());
    }
    let last = (EDGE_SAMPLES - 1) as f64;
    let xs: Vec<f64> = (0..EDGE_SAMPLES)
        .map(|i| lo + (hi - lo) * i as f64 / last)
        .collect();
    let ys = xs
        .iter()
        .map(|&x| net.edge_output(edge, x))
        .collect::<Result<_, _>>()?;
    Ok((xs, ys))
}

/// Best library fit for every unfixed edge.
pub fn suggest_all(net: &Network<f64>, inputs: &[f64]) -> Result<Vec<EdgeFit>, SymbolicError> {
    let mut out = Vec::new();
    for edge in unfixed_edges(net)? {
        let (xs, ys) = edge_samples(net, edge, inputs)?;
        let best = suggest(&xs, &ys, &LIBRARY)?
            .into_iter()
            .next()
            .ok_or(SymbolicError::NoFit(BasicFunction::X))?;
        out.push(EdgeFit {
            edge,
            fit: best,
            fixed: false,
        });
    }
    Ok(out)
}

/// Closed-form expression of a fully fixed network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Expr {
    Var {
        index: usize,
    },
    Const {
        value: f64,
    },
    Sum {
        terms: Vec<Expr>,
    },
    /// `scale * arg + shift`
    Affine {
        scale: f64,
        shift: f64,
        arg: Box<Expr>,
    },
    Apply {
        function: BasicFunction,
        arg: Box<Expr>,
    },
}

fn num(v: f64) -> String {
    let r = (v * 1e4).round() / 1e4;
    let r = if r == 0.0 { 0.0 } else { r };
    let s = format!("{r}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

impl Expr {
    pub fn eval(&self, vars: &[f64]) -> f64 {
        self.eval_with_deriv(vars, usize::MAX).0
    }

    /// Value and partial derivative with respect to variable `var`.
    pub fn eval_with_deriv(&self, vars: &[f64], var: usize) -> (f64, f64) {
        match self {
            Expr::Var { index } => (vars[*index], if *index == var { 1.0 } else { 0.0 }),
            Expr::Const { value } => (*value, 0.0),
            Expr::Sum { terms } => terms.iter().fold((0.0, 0.0), |(v, d), t| {
                let (tv, td) = t.eval_with_deriv(vars, var);
                (v + tv, d + td)
            }),
            Expr::Affine { scale, shift, arg } => {
                let (v, d) = arg.eval_with_deriv(vars, var);
                (scale * v + shift, scale * d)
            }
            Expr::Apply { function, arg } => {
                let (v, d) = arg.eval_with_deriv(vars, var);
                (function.eval(v), function.deriv(v) * d)
            }
        }
    }

    /// Infix text with constants rounded to four decimals.
    pub fn render(&self, names: &[String]) -> String {
        match self {
            Expr::Var { index } => names
                .get(*index)
                .cloned()
                .unwrap_or_else(|| format!("x_{}", index + 1)),
            Expr::Const { value } => num(*value),
            Expr::Sum { terms } => {
                let mut s = String::new();
                for (i, t) in terms.iter().enumerate() {
                    let r = t.render(names);
                    match (i, r.strip_prefix('-')) {
                        (0, _) => s.push_str(&r),
                        (_, Some(abs)) => {
                            let _ = write!(s, " - {abs}");
                        }
                        (_, None) => {
                            let _ = write!(s, " + {r}");
                        }
                    }
                }
                s
            }
            Expr::Affine { scale, shift, arg } => {
                let inner = match **arg {
                    Expr::Sum { ref terms } if terms.len() > 1 => {
                        format!("({})", arg.render(names))
                    }
                    _ => arg.render(names),
                };
                let mut s = format!("{}·{}", num(*scale), inner);
                let sh = num(*shift);
                match sh.strip_prefix('-') {
                    Some(abs) => {
                        let _ = write!(s, " - {abs}");
                    }
                    None => {
                        let _ = write!(s, " + {sh}");
                    }
                }
                s
            }
            Expr::Apply { function, arg } => function.render(&arg.render(names)),
        }
    }
}

/// Expression tree plus its rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Formula {
    pub expr: Expr,
    pub conversion: Conversion,
    pub variables: Vec<String>,
    pub text: String,
}

impl Formula {
    /// Raw network output `y`.
    pub fn eval(&self, vars: &[f64]) -> f64 {
        self.expr.eval(vars)
    }

    /// `y = ...` for charges, `I_D = exp(...)` style for currents.
    pub fn equation(&self, lhs: &str) -> String {
        match self.conversion {
            Conversion::ExpCurrent => format!("{lhs} = exp({})", self.text),
            Conversion::ChargeScale => format!("{lhs} = {}", self.text),
        }
    }
}

pub fn variable_names(width: usize) -> Vec<String> {
    if width == 2 {
        vec!["V_D".to_string(), "V_G".to_string()]
    } else {
        (1..=width).map(|i| format!("x_{i}")).collect()
    }
}

/// Reads a fully fixed KAN as nested edge functions and node sums. Input
/// normalisation is folded into the first-layer `a` coefficients.
pub fn extract_formula(net: &Network<f64>, variables: &[String]) -> Result<Formula, SymbolicError> {
    let ls = kan_layers(net)?;
    let range = net.spec.input_range;
    let mut nodes: Vec<Expr> = (0..net.input_width())
        .map(|index| Expr::Var { index })
        .collect();
    for (l, layer) in ls.iter().enumerate() {
        let mut next = Vec::with_capacity(layer.out_width);
        for j in 0..layer.out_width {
            let mut terms = Vec::with_capacity(layer.in_width + 1);
            for (i, node) in nodes.iter().enumerate() {
                let KanEdge::Symbolic(s) = layer.edge(i, j) else {
                    return Err(SymbolicError::Unfixed(EdgeId {
                        layer: l,
                        input: i,
                        output: j,
                    }));
                };
                let a = if l == 0 { s.a / range } else { s.a };
                terms.push(Expr::Affine {
                    scale: s.c,
                    shift: s.d,
                    arg: Box::new(Expr::Apply {
                        function: s.function,
                        arg: Box::new(Expr::Affine {
                            scale: a,
                            shift: s.b,
                            arg: Box::new(node.clone()),
                        }),
                    }),
                });
            }
            if layer.bias[j] != 0.0 {
                terms.push(Expr::Const {
                    value: layer.bias[j],
                });
            }
            next.push(if terms.len() == 1 {
                terms.pop().unwrap()
            } else {
                Expr::Sum { terms }
            });
        }
        nodes = next;
    }
    let expr = nodes.swap_remove(0);
    Ok(Formula {
        text: expr.render(variables),
        expr,
        conversion: net.spec.conversion,
        variables: variables.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicModel {
    pub network: Network<f64>,
    pub fits: Vec<EdgeFit>,
}

impl SymbolicModel {
    pub fn formula(&self) -> Result<Formula, SymbolicError> {
        extract_formula(&self.network, &variable_names(self.network.input_width()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrRound {
    pub round: usize,
    pub fixed: Vec<EdgeFit>,
    /// Training loss after the retrain phase of this round.
    pub loss: Option<f64>,
    pub mape: Option<SplitMape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrOutcome {
    pub model: SymbolicModel,
    pub rounds: Vec<SrRound>,
    /// Set when a retrain round diverged; `model` then holds the state
    /// before that round's retraining and may be incomplete.
    pub diverged: bool,
}

/// Fix-and-retrain loop: each round fits every unfixed edge, fixes the `k`
/// with the lowest best `R^2` (ties by edge order), then retrains for
/// `retrain_epochs`. `metric` scores the network after each round.
pub fn iterative_sr_with<M>(
    net: &Network<f64>,
    objective: &Objective,
    k: usize,
    config: &TrainConfig,
    retrain_epochs: usize,
    metric: M,
) -> Result<SrOutcome, SymbolicError>
where
    M: Fn(&Network<f64>) -> Option<SplitMape>,
{
    if k == 0 {
        return Err(SymbolicError::ZeroK);
    }
    let (inputs, _) = objective.inputs();
    let mut current = net.clone();
    let mut fits: Vec<EdgeFit> = Vec::new();
    let mut rounds = Vec::new();
    let mut diverged = false;
    while !unfixed_edges(&current)?.is_empty() {
        let mut cands = suggest_all(&current, inputs)?;
        // stable: equal R^2 keeps edge order
        cands.sort_by(|p, q| p.fit.r2.total_cmp(&q.fit.r2));
        cands.truncate(k);
        for c in &mut cands {
            current = fix_edge(&current, c.edge, &c.fit)?;
            c.fixed = true;
        }
        fits.extend(cands.iter().copied());
        let mut loss = objective.loss(&current).ok();
        if retrain_epochs > 0 {
            let out = retrain(current.clone(), config, objective, retrain_epochs)?;
            if out.log.diverged {
                diverged = true;
                rounds.push(SrRound {
                    round: rounds.len() + 1,
                    fixed: cands,
                    loss: None,
                    mape: None,
                });
                break;
            }
            loss = out.log.final_loss;
            current = out.network;
        }
        rounds.push(SrRound {
            round: rounds.len() + 1,
            fixed: cands,
            loss,
            mape: metric(&current),
        });
    }
    // report the trained affine constants rather than the initial fits
    if let Layers::Kan(ls) = &current.layers {
        for f in &mut fits {
            if let KanEdge::Symbolic(s) = ls[f.edge.layer].edge(f.edge.input, f.edge.output) {
                (f.fit.a, f.fit.b, f.fit.c, f.fit.d) = (s.a, s.b, s.c, s.d);
            }
        }
    }
    Ok(SrOutcome {
        model: SymbolicModel {
            network: current,
            fits,
        },
        rounds,
        diverged,
    })
}

/// [`iterative_sr_with`] on a device dataset, retraining for
/// `RETRAIN_FRACTION` of `config.epochs` per round and reporting MAPE.
pub fn iterative_sr(
    net: &Network<f64>,
    dataset: &VoltageGridDataset,
    k: usize,
    config: &TrainConfig,
) -> Result<SrOutcome, SymbolicError> {
    let objective = Objective::Device(DeviceObjective::new(
        dataset,
        config.target,
        config.loss_weight,
    )?);
    let epochs = (config.epochs as f64 * RETRAIN_FRACTION).round() as usize;
    let target = config.target;
    iterative_sr_with(net, &objective, k, config, epochs, |n| {
        dataset_mape(n, dataset, target).ok()
    })
}

/// One-shot fitting of every edge with no retraining.
pub fn posthoc_sr(
    net: &Network<f64>,
    dataset: &VoltageGridDataset,
    config: &TrainConfig,
) -> Result<SrOutcome, SymbolicError> {
    let objective = Objective::Device(DeviceObjective::new(
        dataset,
        config.target,
        config.loss_weight,
    )?);
    let k = net.edge_ids().len();
    let target = config.target;
    iterative_sr_with(net, &objective, k, config, 0, |n| {
        dataset_mape(n, dataset, target).ok()
    })
}

/// Replaces every first-layer edge fed by input `variable` with the
/// constant it produces at zero input.
pub fn ablate_variable(net: &Network<f64>, variable: usize) -> Result<Network<f64>, SymbolicError> {
    if variable >= net.input_width() {
        return Err(SymbolicError::UnknownVariable(variable));
    }
    let mut out = net.clone();
    let ls = kan_layers_mut(&mut out)?;
    let layer = &mut ls[0];
    for j in 0..layer.out_width {
        let edge = layer.edge_mut(variable, j);
        let value = edge.eval(0.0);
        *edge = KanEdge::Symbolic(SymbolicEdge {
            function: BasicFunction::X,
            a: 0.0,
            b: 0.0,
            c: 0.0,
            d: value,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::NetworkSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn recovers_sine() {
        let xs = grid(101);
        let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x + 1.0).sin()).collect();
        let fit = fit_basic(&xs, &ys, BasicFunction::Sin).unwrap();
        assert!(fit.r2 > 0.999);
        for (x, y) in xs.iter().zip(&ys) {
            assert!((fit.eval(*x) - y).abs() < 1e-3);
        }
        assert_eq!(
            suggest(&xs, &ys, &LIBRARY).unwrap()[0].function,
            BasicFunction::Sin
        );
    }

    #[test]
    fn constant_and_linear_samples() {
        let xs = grid(20);
        let fit = fit_basic(&xs, &[5.0; 20], BasicFunction::Tanh).unwrap();
        assert_eq!((fit.c, fit.d, fit.r2), (0.0, 5.0, 1.0));
        let ranked = suggest(&xs, &[5.0; 20], &LIBRARY).unwrap();
        assert_eq!(ranked[0].function, LIBRARY[0]);
        let lin: Vec<f64> = xs.iter().map(|x| 2.0 * x - 0.5).collect();
        let top = suggest(&xs, &lin, &LIBRARY).unwrap()[0];
        assert!((top.r2 - 1.0).abs() < 1e-12);
        assert_eq!(top.function, BasicFunction::X);
    }

    #[test]
    fn square_beats_tanh_on_parabola() {
        let xs = grid(50);
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let sq = fit_basic(&xs, &ys, BasicFunction::X2).unwrap();
        let th = fit_basic(&xs, &ys, BasicFunction::Tanh).unwrap();
        assert!(th.r2 < 0.999 || th.r2 < sq.r2);
        assert!(sq.r2 > th.r2);
    }

    #[test]
    fn r2_invariant_under_affine_rescaling() {
        let xs = grid(40);
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| (2.0 * x).exp() + 0.1 * (7.0 * x).sin())
            .collect();
        let scaled: Vec<f64> = ys.iter().map(|y| -3.5 * y + 12.0).collect();
        for f in [BasicFunction::Exp, BasicFunction::Tanh, BasicFunction::X3] {
            let a = fit_basic(&xs, &ys, f).unwrap();
            let b = fit_basic(&xs, &scaled, f).unwrap();
            assert!((a.r2 - b.r2).abs() < 1e-8, "{f}: {} vs {}", a.r2, b.r2);
        }
    }

    #[test]
    fn input_validation() {
        assert!(matches!(
            fit_basic(&[0.0; 3], &[0.0; 3], BasicFunction::X),
            Err(SymbolicError::TooFewSamples(3))
        ));
        assert!(fit_basic(&grid(10), &[1.0; 9], BasicFunction::X).is_err());
    }

    fn one_edge(f: BasicFunction, a: f64, b: f64, c: f64, d: f64) -> Network<f64> {
        let spec =
            NetworkSpec::kan(vec![1, 1], 3, 4, Conversion::ChargeScale).with_input_range(1.0);
        let net = Network::<f64>::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let fit = Fit {
            function: f,
            a,
            b,
            c,
            d,
            r2: 1.0,
        };
        fix_edge(
            &net,
            EdgeId {
                layer: 0,
                input: 0,
                output: 0,
            },
            &fit,
        )
        .unwrap()
    }

    #[test]
    fn identity_fix_and_rendering() {
        let id = one_edge(BasicFunction::X, 1.0, 0.0, 1.0, 0.0);
        for x in [0.0, 0.3, -2.0] {
            assert_eq!(id.forward(&[x]), x);
        }
        let e = EdgeId {
            layer: 0,
            input: 0,
            output: 0,
        };
        assert!(matches!(
            fix_edge(
                &id,
                e,
                &Fit {
                    function: BasicFunction::X,
                    a: 1.0,
                    b: 0.0,
                    c: 1.0,
                    d: 0.0,
                    r2: 1.0
                }
            ),
            Err(SymbolicError::AlreadyFixed(_))
        ));
        let bad = EdgeId {
            layer: 0,
            input: 3,
            output: 0,
        };
        assert!(fix_edge(
            &id,
            bad,
            &Fit {
                function: BasicFunction::X,
                a: 1.0,
                b: 0.0,
                c: 1.0,
                d: 0.0,
                r2: 1.0
            }
        )
        .is_err());

        let s = one_edge(BasicFunction::Sin, 1.0, 0.0, 2.0, 0.0);
        let f = extract_formula(&s, &["x".to_string()]).unwrap();
        assert_eq!(f.text, "2.0·sin(1.0·x + 0.0) + 0.0");
    }

    #[test]
    fn parallel_edges_sum() {
        let spec =
            NetworkSpec::kan(vec![2, 1], 3, 4, Conversion::ChargeScale).with_input_range(1.0);
        let mut net = Network::<f64>::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let fx = Fit {
            function: BasicFunction::X,
            a: 1.0,
            b: 0.0,
            c: 1.0,
            d: 0.0,
            r2: 1.0,
        };
        let fx2 = Fit {
            function: BasicFunction::X2,
            ..fx
        };
        net = fix_edge(
            &net,
            EdgeId {
                layer: 0,
                input: 0,
                output: 0,
            },
            &fx,
        )
        .unwrap();
        net = fix_edge(
            &net,
            EdgeId {
                layer: 0,
                input: 1,
                output: 0,
            },
            &fx2,
        )
        .unwrap();
        let f = extract_formula(&net, &["x".to_string(), "x".to_string()]).unwrap();
        assert_eq!(
            f.text,
            "1.0·(1.0·x + 0.0) + 0.0 + 1.0·(1.0·x + 0.0)^2 + 0.0"
        );
        for x in [-1.0, 0.5, 2.0] {
            assert!((f.eval(&[x, x]) - (x * x + x)).abs() < 1e-12);
        }
    }

    #[test]
    fn unfixed_edge_blocks_extraction() {
        let spec = NetworkSpec::kan(vec![2, 1], 3, 4, Conversion::ChargeScale);
        let net = Network::<f64>::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            extract_formula(&net, &variable_names(2)),
            Err(SymbolicError::Unfixed(_))
        ));
    }

    #[test]
    fn full_fix_matches_tree_and_derivative() {
        let spec = NetworkSpec::kan(vec![2, 3, 1], 3, 5, Conversion::ChargeScale);
        let mut net = Network::<f64>::init(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let inputs: Vec<f64> = (0..200)
            .flat_map(|i| [0.82 * (i % 20) as f64 / 19.0, 0.82 * (i / 20) as f64 / 9.0])
            .collect();
        for ef in suggest_all(&net, &inputs).unwrap() {
            net = fix_edge(&net, ef.edge, &ef.fit).unwrap();
        }
        let f = extract_formula(&net, &variable_names(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = [
                rand::Rng::random_range(&mut rng, 0.0..0.82),
                rand::Rng::random_range(&mut rng, 0.0..0.82),
            ];
            let (a, b) = (net.forward(&x), f.eval(&x));
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
        }
        let x = [0.4, 0.5];
        let h = 1e-6;
        let fd = (f.eval(&[0.4, 0.5 + h]) - f.eval(&[0.4, 0.5 - h])) / (2.0 * h);
        let (_, d) = f.expr.eval_with_deriv(&x, 1);
        assert!((fd - d).abs() <= 1e-5 * (1.0 + d.abs()));
        let json = serde_json::to_string(&f.expr).unwrap();
        assert!(json.contains("\"op\":\"sum\""));
    }

    #[test]
    fn ablation_is_idempotent_and_dead_inputs_are_harmless() {
        let spec = NetworkSpec::kan(vec![2, 2, 1], 3, 4, Conversion::ChargeScale);
        let mut net = Network::<f64>::init(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // make input 0 dead: both its edges constant
        if let Layers::Kan(ls) = &mut net.layers {
            for j in 0..2 {
                *ls[0].edge_mut(0, j) = KanEdge::Symbolic(SymbolicEdge {
                    function: BasicFunction::Sin,
                    a: 0.0,
                    b: 0.3,
                    c: 1.0,
                    d: 0.2,
                });
            }
        }
        let once = ablate_variable(&net, 0).unwrap();
        let twice = ablate_variable(&once, 0).unwrap();
        assert_eq!(once, twice);
        for x in [[0.1, 0.2], [0.7, 0.4]] {
            assert!((once.forward(&x) - net.forward(&x)).abs() < 1e-12);
        }
        assert!(matches!(
            ablate_variable(&net, 2),
            Err(SymbolicError::UnknownVariable(2))
        ));
    }

    #[test]
    fn rounds_grow_by_k() {
        let spec =
            NetworkSpec::kan(vec![1, 2, 1], 3, 3, Conversion::ChargeScale).with_input_range(1.0);
        let net = Network::<f64>::init(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let xs = grid(30);
        let objective = Objective::Regression(crate::training::RegressionObjective {
            width: 1,
            targets: xs.iter().map(|x| (2.0 * x).sin()).collect(),
            inputs: xs,
        });
        let cfg = TrainConfig::new(
            crate::training::Architecture::KanSr,
            crate::device::Target::Qs,
        );
        let out = iterative_sr_with(&net, &objective, 3, &cfg, 2, |_| None).unwrap();
        // 4 edges with k=3: rounds of 3 then 1
        let sizes: Vec<usize> = out.rounds.iter().map(|r| r.fixed.len()).collect();
        assert_eq!(sizes, vec![3, 1]);
        assert!(out.model.formula().is_ok());
        let post = iterative_sr_with(&net, &objective, 4, &cfg, 0, |_| None).unwrap();
        assert_eq!(post.rounds.len(), 1);
        let mut manual = net.clone();
        for ef in suggest_all(&net, objective.inputs().0).unwrap() {
            manual = fix_edge(&manual, ef.edge, &ef.fit).unwrap();
        }
        assert_eq!(manual, post.model.network);
    }
}
