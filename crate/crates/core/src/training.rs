//! Losses, optimisers and the per-family training procedures.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::device::{Axis, DeviceError, Target, VoltageGridDataset};
use crate::diffengine::{NodeId, SparseOp, Tape};
use crate::evaluate::{dataset_mape, Quartiles, SplitMape};
use crate::networks::{Checkpoint, Network, NetworkError, NetworkKind, NetworkSpec, TrainMeta};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("initial parameters give a non-finite loss")]
    NonFiniteStart,
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Eval(#[from] crate::evaluate::EvalError),
}

/// Mean squared error.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64, TrainError> {
    if pred.len() != truth.len() {
        return Err(TrainError::Length(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(TrainError::Length(0, 0));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

/// The individual error terms of a device loss. Second-derivative and log
/// terms stay zero for charges.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub value: f64,
    pub log_value: f64,
    pub d_vg: f64,
    pub d_vd: f64,
    pub d2_vg: f64,
    pub d2_vd: f64,
}

impl LossTerms {
    /// `a Er(I) + Er(log I) + Er(g_m) + Er(g_DS) + Er(g_m') + Er(g_DS')`.
    pub fn current_loss(&self, weight: f64) -> f64 {
        weight * self.value + self.log_value + self.d_vg + self.d_vd + self.d2_vg + self.d2_vd
    }

    /// `Er(Q) + Er(dQ/dV_G) + Er(dQ/dV_D)`.
    pub fn charge_loss(&self) -> f64 {
        self.value + self.d_vg + self.d_vd
    }
}

struct DerivTerm {
    op: Arc<SparseOp<f64>>,
    truth: Vec<f64>,
}

/// Data-fitting loss on the train sub-grid of a device dataset.
pub struct DeviceObjective {
    target: Target,
    weight: f64,
    inputs: Vec<f64>,
    truth: Vec<f64>,
    /// d/dV_G, d/dV_D, then for currents d2/dV_G2, d2/dV_D2.
    derivs: Vec<DerivTerm>,
    /// Selects points with a positive current for the log term.
    log_select: Option<(Arc<SparseOp<f64>>, Vec<f64>)>,
}

impl DeviceObjective {
    pub fn new(
        dataset: &VoltageGridDataset,
        target: Target,
        weight: f64,
    ) -> Result<Self, TrainError> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(TrainError::Config(format!(
                "loss weight {weight} must be positive"
            )));
        }
        let grid = &dataset.grid;
        let truth = dataset.train_field(target);
        let mut specs = vec![(Axis::Vg, 1), (Axis::Vd, 1)];
        if !target.is_charge() {
            specs.extend([(Axis::Vg, 2), (Axis::Vd, 2)]);
        }
        let mut derivs = Vec::with_capacity(specs.len());
        for (axis, order) in specs {
            let op = grid.derivative_operator(axis, order)?;
            derivs.push(DerivTerm {
                truth: op.apply(&truth),
                op: Arc::new(op),
            });
        }
        let log_select = (!target.is_charge()).then(|| {
            let keep: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] > 0.0).collect();
            let logs = keep.iter().map(|&i| truth[i].ln()).collect();
            (Arc::new(SparseOp::select(truth.len(), &keep)), logs)
        });
        Ok(Self {
            target,
            weight,
            inputs: dataset.train.iter().flat_map(|p| [p.v_d, p.v_g]).collect(),
            truth,
            derivs,
            log_select,
        })
    }

    pub fn target(&self) -> Target {
        self.target
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Error terms for raw network outputs `y` at every train point.
    pub fn terms(&self, y: &[f64]) -> Result<LossTerms, TrainError> {
        if y.len() != self.truth.len() {
            return Err(TrainError::Length(y.len(), self.truth.len()));
        }
        let field: Vec<f64> = if self.target.is_charge() {
            y.to_vec()
        } else {
            y.iter().map(|v| v.exp()).collect()
        };
        let mut t = LossTerms {
            value: mse(&field, &self.truth)?,
            ..LossTerms::default()
        };
        if let Some((sel, logs)) = &self.log_select {
            t.log_value = if logs.is_empty() {
                0.0
            } else {
                mse(&sel.apply(y), logs)?
            };
        }
        let d: Vec<f64> = self
            .derivs
            .iter()
            .map(|d| mse(&d.op.apply(&field), &d.truth))
            .collect::<Result<_, _>>()?;
        t.d_vg = d[0];
        t.d_vd = d[1];
        if d.len() == 4 {
            t.d2_vg = d[2];
            t.d2_vd = d[3];
        }
        Ok(t)
    }

    pub fn loss(&self, y: &[f64]) -> Result<f64, TrainError> {
        let t = self.terms(y)?;
        Ok(if self.target.is_charge() {
            t.charge_loss()
        } else {
            t.current_loss(self.weight)
        })
    }

    fn record(&self, tape: &mut Tape<f64>, y: NodeId) -> NodeId {
        let field = if self.target.is_charge() {
            y
        } else {
            tape.unary(y, crate::diffengine::UnaryOp::Exp)
        };
        let truth = tape.column_constant(self.truth.clone());
        let value = tape.mse(field, truth);
        let mut acc = if self.target.is_charge() {
            value
        } else {
            tape.scale(value, self.weight)
        };
        if let Some((sel, logs)) = &self.log_select {
            if !logs.is_empty() {
                let ys = tape.sparse(y, sel.clone());
                let lt = tape.column_constant(logs.clone());
                let e = tape.mse(ys, lt);
                acc = tape.add(acc, e);
            }
        }
        for d in &self.derivs {
            let df = tape.sparse(field, d.op.clone());
            let dt = tape.column_constant(d.truth.clone());
            let e = tape.mse(df, dt);
            acc = tape.add(acc, e);
        }
        acc
    }
}

/// `loss_current` of the raw outputs `y_I` (with `I_D = exp(y_I)`).
pub fn loss_current(y: &[f64], objective: &DeviceObjective) -> Result<f64, TrainError> {
    if objective.target.is_charge() {
        return Err(TrainError::Config(
            "current loss on a charge objective".into(),
        ));
    }
    objective.loss(y)
}

/// `loss_charge` of the raw outputs `y_Q` (scaled units).
pub fn loss_charge(y: &[f64], objective: &DeviceObjective) -> Result<f64, TrainError> {
    if !objective.target.is_charge() {
        return Err(TrainError::Config(
            "charge loss on a current objective".into(),
        ));
    }
    objective.loss(y)
}

/// Plain regression `mean((y - t)^2)` on arbitrary inputs.
pub struct RegressionObjective {
    pub width: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

pub enum Objective {
    Device(DeviceObjective),
    Regression(RegressionObjective),
}

impl Objective {
    pub fn inputs(&self) -> (&[f64], usize) {
        match self {
            Objective::Device(d) => (&d.inputs, 2),
            Objective::Regression(r) => (&r.inputs, r.width),
        }
    }

    pub fn len(&self) -> usize {
        let (x, w) = self.inputs();
        x.len() / w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loss of a network evaluated without the tape.
    pub fn loss(&self, net: &Network<f64>) -> Result<f64, TrainError> {
        let (x, _) = self.inputs();
        let y = net.forward_batch(x)?;
        match self {
            Objective::Device(d) => d.loss(&y),
            Objective::Regression(r) => mse(&y, &r.targets),
        }
    }

    fn record(&self, tape: &mut Tape<f64>, y: NodeId) -> NodeId {
        match self {
            Objective::Device(d) => d.record(tape, y),
            Objective::Regression(r) => {
                let t = tape.column_constant(r.targets.clone());
                tape.mse(y, t)
            }
        }
    }
}

/// Network plus loss recorded once, replayed for every parameter vector.
pub struct Problem {
    tape: Tape<f64>,
    loss: NodeId,
    evals: usize,
}

impl Problem {
    pub fn new(net: &Network<f64>, objective: &Objective) -> Self {
        let (x, w) = objective.inputs();
        let mut tape = Tape::new();
        let input = tape.constant(x.len() / w, w, x.to_vec());
        let y = net.build_tape(&mut tape, input);
        let loss = objective.record(&mut tape, y);
        Self {
            tape,
            loss,
            evals: 0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.tape.leaf_len()
    }

    /// Loss and gradient, or `None` when anything along the way is not finite.
    pub fn value_grad(&mut self, params: &[f64]) -> Option<(f64, Vec<f64>)> {
        self.evals += 1;
        let loss = match self.tape.forward(params) {
            Ok(v) => v[0],
            Err(_) => return None,
        };
        let grad = self.tape.backward(self.loss).ok()?;
        (loss.is_finite() && grad.iter().all(|g| g.is_finite())).then_some((loss, grad))
    }

    pub fn evaluations(&self) -> usize {
        self.evals
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

pub struct Adam {
    settings: AdamSettings,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, settings: AdamSettings) -> Self {
        Self {
            settings,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let s = self.settings;
        self.t += 1;
        let bc1 = 1.0 - s.beta1.powi(self.t);
        let bc2 = 1.0 - s.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i] + s.weight_decay * params[i];
            self.m[i] = s.beta1 * self.m[i] + (1.0 - s.beta1) * g;
            self.v[i] = s.beta2 * self.v[i] + (1.0 - s.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + s.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsSettings {
    pub history: usize,
    /// Quasi-Newton iterations per epoch.
    pub max_iter: usize,
    pub tolerance_grad: f64,
    pub tolerance_change: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        Self {
            history: 10,
            max_iter: 20,
            tolerance_grad: 1e-32,
            tolerance_change: 1e-32,
            max_line_search: 25,
        }
    }
}

/// Limited-memory BFGS with a strong-Wolfe line search. State carries over
/// between calls to [`Lbfgs::step`].
pub struct Lbfgs {
    settings: LbfgsSettings,
    lr: f64,
    d: Vec<f64>,
    t: f64,
    dirs: Vec<Vec<f64>>,
    steps: Vec<Vec<f64>>,
    ro: Vec<f64>,
    h_diag: f64,
    prev_grad: Vec<f64>,
    n_iter: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cubic_interpolate(
    x1: f64,
    f1: f64,
    g1: f64,
    x2: f64,
    f2: f64,
    g2: f64,
    bounds: Option<(f64, f64)>,
) -> f64 {
    let (lo, hi) = bounds.unwrap_or((x1.min(x2), x1.max(x2)));
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let pos = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if pos.is_finite() {
            return pos.max(lo).min(hi);
        }
    }
    (lo + hi) / 2.0
}

struct Trial {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

impl Lbfgs {
    pub fn new(settings: LbfgsSettings, lr: f64) -> Self {
        Self {
            settings,
            lr,
            d: Vec::new(),
            t: 0.0,
            dirs: Vec::new(),
            steps: Vec::new(),
            ro: Vec::new(),
            h_diag: 1.0,
            prev_grad: Vec::new(),
            n_iter: 0,
        }
    }

    fn evaluate(problem: &mut Problem, x: &[f64], t: f64, d: &[f64]) -> (f64, Vec<f64>) {
        let p: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
        problem
            .value_grad(&p)
            .unwrap_or_else(|| (f64::INFINITY, vec![0.0; x.len()]))
    }

    fn strong_wolfe(
        &self,
        problem: &mut Problem,
        x: &[f64],
        t0: f64,
        d: &[f64],
        f: f64,
        g: &[f64],
        gtd: f64,
    ) -> Trial {
        const C1: f64 = 1e-4;
        const C2: f64 = 0.9;
        let max_ls = self.settings.max_line_search;
        let tol = self.settings.tolerance_change;
        let d_norm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut t = t0;
        let (mut f_new, mut g_new) = Self::evaluate(problem, x, t, d);
        let mut gtd_new = dot(&g_new, d);
        let mut prev = Trial {
            t: 0.0,
            f,
            g: g.to_vec(),
            gtd,
        };
        let mut done = false;
        let mut ls_iter = 0;
        let mut bracket: Vec<Trial> = loop {
            if ls_iter == max_ls {
                let start = Trial {
                    t: 0.0,
                    f,
                    g: g.to_vec(),
                    gtd,
                };
                break vec![
                    start,
                    Trial {
                        t,
                        f: f_new,
                        g: g_new,
                        gtd: gtd_new,
                    },
                ];
            }
            if f_new > f + C1 * t * gtd || (ls_iter > 1 && f_new >= prev.f) {
                break vec![
                    prev,
                    Trial {
                        t,
                        f: f_new,
                        g: g_new,
                        gtd: gtd_new,
                    },
                ];
            }
            if gtd_new.abs() <= -C2 * gtd {
                done = true;
                break vec![Trial {
                    t,
                    f: f_new,
                    g: g_new,
                    gtd: gtd_new,
                }];
            }
            if gtd_new >= 0.0 {
                break vec![
                    prev,
                    Trial {
                        t,
                        f: f_new,
                        g: g_new,
                        gtd: gtd_new,
                    },
                ];
            }
            let min_step = t + 0.01 * (t - prev.t);
            let max_step = t * 10.0;
            let tmp = t;
            t = cubic_interpolate(
                prev.t,
                prev.f,
                prev.gtd,
                t,
                f_new,
                gtd_new,
                Some((min_step, max_step)),
            );
            prev = Trial {
                t: tmp,
                f: f_new,
                g: g_new,
                gtd: gtd_new,
            };
            (f_new, g_new) = Self::evaluate(problem, x, t, d);
            gtd_new = dot(&g_new, d);
            ls_iter += 1;
        };
        let order = |b: &[Trial]| {
            if b[0].f <= b[b.len() - 1].f {
                (0, 1)
            } else {
                (1, 0)
            }
        };
        let (mut low, mut high) = order(&bracket);
        let mut insuf_progress = false;
        while !done && ls_iter < max_ls && bracket.len() == 2 {
            if (bracket[1].t - bracket[0].t).abs() * d_norm < tol {
                break;
            }
            let (b0, b1) = (&bracket[0], &bracket[1]);
            let mut t = cubic_interpolate(b0.t, b0.f, b0.gtd, b1.t, b1.f, b1.gtd, None);
            let bmax = b0.t.max(b1.t);
            let bmin = b0.t.min(b1.t);
            let eps = 0.1 * (bmax - bmin);
            if (bmax - t).min(t - bmin) < eps {
                if insuf_progress || t >= bmax || t <= bmin {
                    t = if (t - bmax).abs() < (t - bmin).abs() {
                        bmax - eps
                    } else {
                        bmin + eps
                    };
                    insuf_progress = false;
                } else {
                    insuf_progress = true;
                }
            } else {
                insuf_progress = false;
            }
            let (f_new, g_new) = Self::evaluate(problem, x, t, d);
            let gtd_new = dot(&g_new, d);
            ls_iter += 1;
            let trial = Trial {
                t,
                f: f_new,
                g: g_new,
                gtd: gtd_new,
            };
            if f_new > f + C1 * t * gtd || f_new >= bracket[low].f {
                bracket[high] = trial;
                (low, high) = order(&bracket);
            } else {
                if gtd_new.abs() <= -C2 * gtd {
                    done = true;
                } else if gtd_new * (bracket[high].t - bracket[low].t) >= 0.0 {
                    bracket.swap(high, low);
                }
                bracket[low] = trial;
            }
        }
        bracket.swap_remove(low)
    }

    /// One epoch: up to `max_iter` quasi-Newton iterations. Returns the loss
    /// at the starting parameters, or `None` if that loss is not finite.
    pub fn step(&mut self, problem: &mut Problem, params: &mut [f64]) -> Option<f64> {
        let s = self.settings;
        let (orig_loss, mut g) = problem.value_grad(params)?;
        let mut loss = orig_loss;
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= s.tolerance_grad {
            return Some(orig_loss);
        }
        let max_eval = s.max_iter * 5 / 4;
        let mut evals = 1;
        let mut n_iter = 0;
        while n_iter < s.max_iter {
            n_iter += 1;
            self.n_iter += 1;
            if self.n_iter == 1 {
                self.d = g.iter().map(|v| -v).collect();
                self.dirs.clear();
                self.steps.clear();
                self.ro.clear();
                self.h_diag = 1.0;
            } else {
                let y: Vec<f64> = g.iter().zip(&self.prev_grad).map(|(a, b)| a - b).collect();
                let st: Vec<f64> = self.d.iter().map(|v| v * self.t).collect();
                let ys = dot(&y, &st);
                if ys > 1e-10 {
                    if self.dirs.len() == s.history {
                        self.dirs.remove(0);
                        self.steps.remove(0);
                        self.ro.remove(0);
                    }
                    self.h_diag = ys / dot(&y, &y);
                    self.dirs.push(y);
                    self.steps.push(st);
                    self.ro.push(1.0 / ys);
                }
                let k = self.dirs.len();
                let mut al = vec![0.0; k];
                let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
                for i in (0..k).rev() {
                    al[i] = dot(&self.steps[i], &q) * self.ro[i];
                    for (qj, yj) in q.iter_mut().zip(&self.dirs[i]) {
                        *qj -= al[i] * yj;
                    }
                }
                let mut r: Vec<f64> = q.iter().map(|v| v * self.h_diag).collect();
                for i in 0..k {
                    let be = dot(&self.dirs[i], &r) * self.ro[i];
                    for (rj, sj) in r.iter_mut().zip(&self.steps[i]) {
                        *rj += sj * (al[i] - be);
                    }
                }
                self.d = r;
            }
            self.prev_grad = g.clone();
            let prev_loss = loss;
            self.t = if self.n_iter == 1 {
                let g1: f64 = g.iter().map(|v| v.abs()).sum();
                (1.0f64).min(1.0 / g1) * self.lr
            } else {
                self.lr
            };
            let gtd = dot(&g, &self.d);
            if gtd > -s.tolerance_change {
                break;
            }
            let before = problem.evaluations();
            let trial = self.strong_wolfe(problem, params, self.t, &self.d.clone(), loss, &g, gtd);
            evals += problem.evaluations() - before;
            self.t = trial.t;
            for (p, di) in params.iter_mut().zip(&self.d) {
                *p += self.t * di;
            }
            loss = trial.f;
            g = trial.g;
            if n_iter == s.max_iter || evals >= max_eval {
                break;
            }
            if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= s.tolerance_grad {
                break;
            }
            if self.d.iter().fold(0.0f64, |m, v| m.max((v * self.t).abs())) <= s.tolerance_change {
                break;
            }
            if (loss - prev_loss).abs() < s.tolerance_change {
                break;
            }
        }
        Some(orig_loss)
    }
}

/// `initial * factor^(epoch / interval)` with integer division.
pub fn step_decay_lr(initial: f64, factor: f64, interval: usize, epoch: usize) -> f64 {
    initial * factor.powi((epoch / interval.max(1)) as i32)
}

/// Halves (by `factor`) the learning rate when the best loss has not
/// improved by a relative `threshold` for `window` epochs.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub window: usize,
    pub threshold: f64,
    pub factor: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(window: usize, threshold: f64, factor: f64) -> Self {
        Self {
            window,
            threshold,
            factor,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feeds one epoch's loss and returns the learning rate to use next.
    pub fn update(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.stale = 0;
            lr
        } else {
            self.stale += 1;
            if self.stale >= self.window {
                self.stale = 0;
                lr * self.factor
            } else {
                lr
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Mlp1,
    Mlp2,
    Kan1,
    Kan2,
    /// `[2, 6, 1]` KAN for iterative symbolic fitting.
    KanSr,
    Fkan1,
    Fkan2,
}

impl Architecture {
    pub const ALL: [Architecture; 7] = [
        Architecture::Mlp1,
        Architecture::Mlp2,
        Architecture::Kan1,
        Architecture::Kan2,
        Architecture::KanSr,
        Architecture::Fkan1,
        Architecture::Fkan2,
    ];

    pub fn spec(self, target: Target) -> NetworkSpec {
        match self {
            Architecture::Mlp1 => NetworkSpec::mlp1(target),
            Architecture::Mlp2 => NetworkSpec::mlp2(target),
            Architecture::Kan1 => NetworkSpec::kan1(target),
            Architecture::Kan2 => NetworkSpec::kan2(target),
            Architecture::KanSr => NetworkSpec::kan_symbolic(target),
            Architecture::Fkan1 => NetworkSpec::fkan1(target),
            Architecture::Fkan2 => NetworkSpec::fkan2(target),
        }
    }

    pub fn kind(self) -> NetworkKind {
        match self {
            Architecture::Mlp1 | Architecture::Mlp2 => NetworkKind::Mlp,
            Architecture::Kan1 | Architecture::Kan2 | Architecture::KanSr => NetworkKind::Kan,
            Architecture::Fkan1 | Architecture::Fkan2 => NetworkKind::Fkan,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Mlp1 => "mlp1",
            Architecture::Mlp2 => "mlp2",
            Architecture::Kan1 => "kan1",
            Architecture::Kan2 => "kan2",
            Architecture::KanSr => "kan-sr",
            Architecture::Fkan1 => "fkan1",
            Architecture::Fkan2 => "fkan2",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Architecture {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown architecture '{s}'")))
    }
}

/// Everything a training run needs. Missing schedule values fall back to
/// per-family defaults via [`TrainConfig::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub target: Target,
    pub step_mv: u32,
    pub seed: u64,
    /// Weight `a` of the current term in the current loss.
    pub loss_weight: f64,
    /// Total epochs (for KANs, summed over the ladder).
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Adam: epochs without a 0.1% improvement before the rate halves.
    pub plateau_window: usize,
    pub plateau_threshold: f64,
    pub plateau_factor: f64,
    /// Adam on MLPs stops once the rate falls below this.
    pub min_lr: f64,
    /// Fourier KAN step decay factor and interval.
    pub decay_factor: f64,
    pub decay_interval: usize,
    /// KAN grid sizes; the last one is the final grid.
    pub ladder: Vec<usize>,
    pub lbfgs: LbfgsSettings,
}

/// Desk-scale epoch budgets.
pub const DESK_EPOCHS_MLP: usize = 5_000;
pub const DESK_EPOCHS_KAN: usize = 1_500;
pub const DESK_EPOCHS_FKAN: usize = 10_000;
/// Fourier KAN budget and decay interval at full scale.
pub const FULL_EPOCHS_FKAN: usize = 60_000;
pub const FULL_DECAY_INTERVAL: usize = 2_000;
/// Adam on MLPs runs until the plateau schedule drives the rate below
/// `min_lr`; this only caps runaway runs.
pub const FULL_EPOCHS_MLP: usize = 200_000;

impl TrainConfig {
    /// Defaults for an architecture and target at desk scale.
    pub fn new(architecture: Architecture, target: Target) -> Self {
        let charge = target.is_charge();
        let kind = architecture.kind();
        let (epochs, lr) = match kind {
            NetworkKind::Mlp => (DESK_EPOCHS_MLP, if charge { 0.01 } else { 0.005 }),
            NetworkKind::Kan => (DESK_EPOCHS_KAN, if charge { 1.0 } else { 0.1 }),
            NetworkKind::Fkan => (DESK_EPOCHS_FKAN, 0.002),
        };
        let ladder = match kind {
            NetworkKind::Kan => vec![2, 4, 8, 12, 16],
            _ => Vec::new(),
        };
        let mut cfg = Self {
            architecture,
            target,
            step_mv: 10,
            seed: 0,
            loss_weight: 100.0,
            epochs,
            lr,
            weight_decay: if kind == NetworkKind::Mlp { 1e-5 } else { 0.0 },
            plateau_window: 500,
            plateau_threshold: 1e-3,
            plateau_factor: 0.5,
            min_lr: 1e-5,
            decay_factor: 0.85,
            decay_interval: FULL_DECAY_INTERVAL,
            ladder,
            lbfgs: LbfgsSettings::default(),
        };
        cfg.decay_interval = cfg.scaled_decay_interval();
        cfg
    }

    /// Same defaults with the full epoch budgets.
    pub fn full(architecture: Architecture, target: Target) -> Self {
        let mut cfg = Self::new(architecture, target);
        match architecture.kind() {
            NetworkKind::Mlp => cfg.epochs = FULL_EPOCHS_MLP,
            NetworkKind::Kan => {}
            NetworkKind::Fkan => cfg.epochs = FULL_EPOCHS_FKAN,
        }
        cfg.decay_interval = cfg.scaled_decay_interval();
        cfg
    }

    /// Decay interval that keeps `FULL_EPOCHS_FKAN / FULL_DECAY_INTERVAL`
    /// decays over the configured budget.
    pub fn scaled_decay_interval(&self) -> usize {
        let scaled = (FULL_DECAY_INTERVAL as f64 * self.epochs as f64 / FULL_EPOCHS_FKAN as f64)
            .round() as usize;
        scaled.max(1)
    }

    pub fn spec(&self) -> NetworkSpec {
        let mut spec = self.architecture.spec(self.target);
        if spec.kind == NetworkKind::Kan {
            if let Some(&g) = self.ladder.first() {
                spec.grids = vec![g; spec.num_layers()];
            }
        }
        spec
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !crate::device::SUPPORTED_STEPS_MV.contains(&self.step_mv) {
            return bad(format!("unsupported dataset step {} mV", self.step_mv));
        }
        if !(self.loss_weight.is_finite() && self.loss_weight > 0.0) {
            return bad(format!("loss weight {} must be positive", self.loss_weight));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.plateau_threshold) {
            return bad("negative weight decay or plateau threshold outside [0, 1)".into());
        }
        if !(self.plateau_factor > 0.0
            && self.plateau_factor < 1.0
            && self.decay_factor > 0.0
            && self.decay_factor <= 1.0)
        {
            return bad("schedule factors must lie in (0, 1)".into());
        }
        if self.plateau_window == 0 || self.decay_interval == 0 {
            return bad("schedule windows must be positive".into());
        }
        if self.lbfgs.history == 0 || self.lbfgs.max_iter == 0 || self.lbfgs.max_line_search == 0 {
            return bad(
                "L-BFGS history, iterations and line-search length must be positive".into(),
            );
        }
        if self.architecture.kind() == NetworkKind::Kan {
            if self.ladder.is_empty() || self.ladder.contains(&0) {
                return bad("KAN ladder must hold positive grid sizes".into());
            }
            if self.ladder.windows(2).any(|w| w[1] <= w[0]) {
                return bad(format!(
                    "ladder {:?} is not strictly increasing",
                    self.ladder
                ));
            }
            let final_grid = self.architecture.spec(self.target).grids[0];
            if *self.ladder.last().unwrap() != final_grid {
                return bad(format!("ladder must end at G={final_grid}"));
            }
        }
        Ok(())
    }

    /// Epochs per ladder stage; the remainder goes to the final stage.
    pub fn stage_epochs(&self) -> Vec<usize> {
        let n = self.ladder.len().max(1);
        let base = self.epochs / n;
        let mut v = vec![base; n];
        v[n - 1] += self.epochs - base * n;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub stage: usize,
}

/// One grid stage of a KAN run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub grid: usize,
    pub start_epoch: usize,
    /// Loss right before and right after the grid transfer.
    pub loss_before: f64,
    pub loss_after: f64,
    /// Largest change of the raw network output at train points.
    pub max_output_change: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub stages: Vec<StageRecord>,
    pub optimizer: String,
    pub final_loss: Option<f64>,
    pub diverged: bool,
    pub wall_clock_s: f64,
}

impl TrainLog {
    /// `epoch,loss,lr,stage` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,lr,stage\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:.17e},{:.17e},{}", r.epoch, r.loss, r.lr, r.stage);
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

pub struct TrainOutcome {
    pub network: Network<f64>,
    pub log: TrainLog,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint::new(
            self.network.clone(),
            TrainMeta {
                seed: config.seed,
                epochs: self.log.records.len(),
                final_loss: self.log.final_loss,
                target: Some(config.target),
                step_mv: Some(config.step_mv),
                diverged: self.log.diverged,
            },
        )
    }
}

enum AdamSchedule {
    Plateau(PlateauSchedule, f64),
    Step {
        initial: f64,
        factor: f64,
        interval: usize,
    },
}

fn run_adam(
    net: &mut Network<f64>,
    objective: &Objective,
    epochs: usize,
    lr: f64,
    settings: AdamSettings,
    mut schedule: AdamSchedule,
    log: &mut TrainLog,
) -> Result<(), TrainError> {
    let mut problem = Problem::new(net, objective);
    let mut params = net.params();
    let mut last_good = params.clone();
    let mut adam = Adam::new(params.len(), settings);
    let mut lr = lr;
    for epoch in 0..epochs {
        if let AdamSchedule::Step {
            initial,
            factor,
            interval,
        } = schedule
        {
            lr = step_decay_lr(initial, factor, interval, epoch);
        }
        let Some((loss, grad)) = problem.value_grad(&params) else {
            log.diverged = true;
            break;
        };
        last_good.copy_from_slice(&params);
        log.records.push(EpochRecord {
            epoch: log.records.len(),
            loss,
            lr,
            stage: 0,
        });
        adam.step(&mut params, &grad, lr);
        if let AdamSchedule::Plateau(p, min_lr) = &mut schedule {
            lr = p.update(loss, lr);
            if lr < *min_lr {
                break;
            }
        }
    }
    if !log.diverged && problem.value_grad(&params).is_none() {
        log.diverged = true;
    }
    net.set_params(if log.diverged { &last_good } else { &params })?;
    Ok(())
}

fn run_lbfgs(
    net: &mut Network<f64>,
    objective: &Objective,
    epochs: usize,
    lr: f64,
    settings: LbfgsSettings,
    stage: usize,
    log: &mut TrainLog,
) -> Result<(), TrainError> {
    if epochs == 0 {
        return Ok(());
    }
    let mut problem = Problem::new(net, objective);
    let mut params = net.params();
    let mut last_good = params.clone();
    let mut opt = Lbfgs::new(settings, lr);
    for _ in 0..epochs {
        let Some(loss) = opt.step(&mut problem, &mut params) else {
            log.diverged = true;
            break;
        };
        log.records.push(EpochRecord {
            epoch: log.records.len(),
            loss,
            lr,
            stage,
        });
        last_good.copy_from_slice(&params);
    }
    net.set_params(&last_good)?;
    Ok(())
}

fn finish(
    net: Network<f64>,
    objective: &Objective,
    mut log: TrainLog,
    start: Instant,
) -> TrainOutcome {
    log.final_loss = objective.loss(&net).ok().filter(|l| l.is_finite());
    if log.final_loss.is_none() {
        log.diverged = true;
    }
    log.wall_clock_s = start.elapsed().as_secs_f64();
    TrainOutcome { network: net, log }
}

fn init_network(config: &TrainConfig) -> Result<Network<f64>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(Network::init(&config.spec(), &mut rng)?)
}

fn check_kind(config: &TrainConfig, kind: NetworkKind) -> Result<(), TrainError> {
    config.validate()?;
    if config.architecture.kind() != kind {
        return Err(TrainError::Config(format!(
            "{} is not a {:?} architecture",
            config.architecture, kind
        )));
    }
    Ok(())
}

/// Full-batch Adam with the plateau schedule, starting from `net`.
pub fn train_mlp_from(
    net: Network<f64>,
    config: &TrainConfig,
    objective: &Objective,
) -> Result<TrainOutcome, TrainError> {
    let start = Instant::now();
    let mut net = net;
    let mut log = TrainLog {
        optimizer: format!(
            "adam(beta1=0.9, beta2=0.999, eps=1e-8, weight_decay={}); plateau(window={}, threshold={}, factor={}, min_lr={})",
            config.weight_decay, config.plateau_window, config.plateau_threshold, config.plateau_factor, config.min_lr
        ),
        ..TrainLog::default()
    };
    let settings = AdamSettings {
        weight_decay: config.weight_decay,
        ..AdamSettings::default()
    };
    let schedule = AdamSchedule::Plateau(
        PlateauSchedule::new(
            config.plateau_window,
            config.plateau_threshold,
            config.plateau_factor,
        ),
        config.min_lr,
    );
    run_adam(
        &mut net,
        objective,
        config.epochs,
        config.lr,
        settings,
        schedule,
        &mut log,
    )?;
    Ok(finish(net, objective, log, start))
}

pub fn train_mlp(config: &TrainConfig, objective: &Objective) -> Result<TrainOutcome, TrainError> {
    check_kind(config, NetworkKind::Mlp)?;
    train_mlp_from(init_network(config)?, config, objective)
}

/// Full-batch Adam with step decay, starting from `net`.
pub fn train_fkan_from(
    net: Network<f64>,
    config: &TrainConfig,
    objective: &Objective,
) -> Result<TrainOutcome, TrainError> {
    let start = Instant::now();
    let mut net = net;
    let mut log = TrainLog {
        optimizer: format!(
            "adam(beta1=0.9, beta2=0.999, eps=1e-8); step(factor={}, interval={})",
            config.decay_factor, config.decay_interval
        ),
        ..TrainLog::default()
    };
    let schedule = AdamSchedule::Step {
        initial: config.lr,
        factor: config.decay_factor,
        interval: config.decay_interval,
    };
    run_adam(
        &mut net,
        objective,
        config.epochs,
        config.lr,
        AdamSettings::default(),
        schedule,
        &mut log,
    )?;
    Ok(finish(net, objective, log, start))
}

pub fn train_fkan(config: &TrainConfig, objective: &Objective) -> Result<TrainOutcome, TrainError> {
    check_kind(config, NetworkKind::Fkan)?;
    train_fkan_from(init_network(config)?, config, objective)
}

fn max_output_change(
    a: &Network<f64>,
    b: &Network<f64>,
    objective: &Objective,
) -> Result<f64, TrainError> {
    let (x, _) = objective.inputs();
    let ya = a.forward_batch(x)?;
    let yb = b.forward_batch(x)?;
    Ok(ya
        .iter()
        .zip(&yb)
        .fold(0.0f64, |m, (p, q)| m.max((p - q).abs())))
}

/// Grid-refinement ladder with L-BFGS at every stage, starting from `net`.
/// The network is re-gridded to each ladder size in turn (a no-op when it
/// already has that size).
pub fn train_kan_from(
    net: Network<f64>,
    config: &TrainConfig,
    objective: &Objective,
) -> Result<TrainOutcome, TrainError> {
    let start = Instant::now();
    let s = config.lbfgs;
    let mut log = TrainLog {
        optimizer: format!(
            "lbfgs(history={}, max_iter={}, line_search=strong_wolfe(c1=1e-4, c2=0.9, max_ls={})); ladder={:?}",
            s.history, s.max_iter, s.max_line_search, config.ladder
        ),
        ..TrainLog::default()
    };
    let mut net = net;
    for (stage, (&grid, epochs)) in config.ladder.iter().zip(config.stage_epochs()).enumerate() {
        let loss_before = objective.loss(&net)?;
        let current = net.spec.grids.first().copied();
        let (next, change) = if current == Some(grid) {
            (net, 0.0)
        } else {
            let refined = net.refine_on(grid, objective.inputs().0)?;
            let change = max_output_change(&net, &refined, objective)?;
            (refined, change)
        };
        net = next;
        log.stages.push(StageRecord {
            stage,
            grid,
            start_epoch: log.records.len(),
            loss_before,
            loss_after: objective.loss(&net)?,
            max_output_change: change,
        });
        run_lbfgs(&mut net, objective, epochs, config.lr, s, stage, &mut log)?;
        if log.diverged {
            break;
        }
    }
    Ok(finish(net, objective, log, start))
}

pub fn train_kan(config: &TrainConfig, objective: &Objective) -> Result<TrainOutcome, TrainError> {
    check_kind(config, NetworkKind::Kan)?;
    train_kan_from(init_network(config)?, config, objective)
}

/// Continues training an existing network with its family's optimiser for
/// `epochs` epochs. KANs stay on their current grid.
pub fn retrain(
    net: Network<f64>,
    config: &TrainConfig,
    objective: &Objective,
    epochs: usize,
) -> Result<TrainOutcome, TrainError> {
    let mut cfg = config.clone();
    cfg.epochs = epochs;
    match net.kind() {
        NetworkKind::Mlp => train_mlp_from(net, &cfg, objective),
        NetworkKind::Fkan => train_fkan_from(net, &cfg, objective),
        NetworkKind::Kan => {
            cfg.ladder = net.spec.grids.first().copied().into_iter().collect();
            train_kan_from(net, &cfg, objective)
        }
    }
}

/// Trains the configured architecture on `dataset`.
pub fn train(
    config: &TrainConfig,
    dataset: &VoltageGridDataset,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.step_mv != config.step_mv {
        return Err(TrainError::Config(format!(
            "config asks for {} mV data, dataset has {} mV",
            config.step_mv, dataset.step_mv
        )));
    }
    let objective = Objective::Device(DeviceObjective::new(
        dataset,
        config.target,
        config.loss_weight,
    )?);
    match config.architecture.kind() {
        NetworkKind::Mlp => train_mlp(config, &objective),
        NetworkKind::Kan => train_kan(config, &objective),
        NetworkKind::Fkan => train_fkan(config, &objective),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub seed: u64,
    /// `None` when the run diverged before producing a usable model.
    pub mape: Option<SplitMape>,
    pub diverged: bool,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub runs: Vec<SweepRun>,
    pub train: Option<Quartiles>,
    pub test: Option<Quartiles>,
}

impl SweepSummary {
    pub fn from_runs(runs: Vec<SweepRun>) -> Self {
        let train: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.mape.map(|m| m.train))
            .collect();
        let test: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.mape.and_then(|m| m.test))
            .collect();
        Self {
            train: Quartiles::from_values(&train),
            test: Quartiles::from_values(&test),
            runs,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,train_mape,test_mape,diverged,final_loss\n");
        let f = |v: Option<f64>| v.map(|x| format!("{x:.10e}")).unwrap_or_default();
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.seed,
                f(r.mape.map(|m| m.train)),
                f(r.mape.and_then(|m| m.test)),
                r.diverged,
                f(r.final_loss)
            );
        }
        s
    }
}

/// Trains `n_seeds` models with seeds `config.seed, config.seed + 1, ...`.
/// Each finished run is handed to `on_run` (for saving checkpoints).
pub fn seed_sweep<F>(
    config: &TrainConfig,
    dataset: &VoltageGridDataset,
    n_seeds: usize,
    mut on_run: F,
) -> Result<SweepSummary, TrainError>
where
    F: FnMut(&TrainConfig, &TrainOutcome) -> Result<(), TrainError>,
{
    if n_seeds == 0 {
        return Err(TrainError::Config(
            "seed sweep needs at least one seed".into(),
        ));
    }
    let mut runs = Vec::with_capacity(n_seeds);
    for i in 0..n_seeds {
        let mut cfg = config.clone();
        cfg.seed = config.seed + i as u64;
        let outcome = train(&cfg, dataset)?;
        on_run(&cfg, &outcome)?;
        let mape = if outcome.log.final_loss.is_some() {
            dataset_mape(&outcome.network, dataset, cfg.target).ok()
        } else {
            None
        };
        runs.push(SweepRun {
            seed: cfg.seed,
            mape,
            diverged: outcome.log.diverged,
            final_loss: outcome.log.final_loss,
        });
    }
    Ok(SweepSummary::from_runs(runs))
}
