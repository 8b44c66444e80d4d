//! Error metrics, derivative sweeps and report tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::device::{Axis, DevicePoint, RectGrid, Target, VoltageGridDataset, V_MAX};
use crate::networks::Network;

/// Charges with `|Q| < 0.01` (units of 1e-18 F) are left out of the charge error.
pub const CHARGE_FLOOR: f64 = 0.01;

/// Drain voltages of the default transconductance sweeps.
pub const DEFAULT_SWEEP_VD: [f64; 2] = [0.4, 0.8];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction has {pred} values but truth has {truth}")]
    Length { pred: usize, truth: usize },
    #[error("error metric undefined: {0}")]
    Undefined(&'static str),
    #[error("drain voltage {0} outside [0, 0.82] V")]
    Voltage(f64),
    #[error("sweep resolution must be positive")]
    Resolution,
    #[error(transparent)]
    Device(#[from] crate::device::DeviceError),
    #[error(transparent)]
    Network(#[from] crate::networks::NetworkError),
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
}

/// Ratio error `sum |y - y_hat| / sum |y|`.
pub fn mape(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Length {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::Undefined("no points"));
    }
    let den: f64 = truth.iter().map(|y| y.abs()).sum();
    if den == 0.0 {
        return Err(EvalError::Undefined("all-zero truth"));
    }
    let num: f64 = pred.iter().zip(truth).map(|(p, y)| (y - p).abs()).sum();
    Ok(num / den)
}

/// [`mape`] over the points whose true charge clears [`CHARGE_FLOOR`].
pub fn mape_charge(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Length {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let (p, t): (Vec<f64>, Vec<f64>) = pred
        .iter()
        .zip(truth)
        .filter(|(_, y)| y.abs() >= CHARGE_FLOOR)
        .map(|(p, y)| (*p, *y))
        .unzip();
    if t.is_empty() {
        return Err(EvalError::Undefined("every point below the charge floor"));
    }
    mape(&p, &t)
}

/// The metric that applies to `target`.
pub fn target_mape(target: Target, pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if target.is_charge() {
        mape_charge(pred, truth)
    } else {
        mape(pred, truth)
    }
}

/// Network predictions in dataset units (amperes or 1e-18 F).
pub fn predict(net: &Network<f64>, points: &[DevicePoint]) -> Vec<f64> {
    points
        .iter()
        .map(|p| net.spec.conversion.apply(net.forward(&[p.v_d, p.v_g])))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMape {
    pub train: f64,
    /// `None` when the dataset has no test split (5 mV).
    pub test: Option<f64>,
}

pub fn dataset_mape(
    net: &Network<f64>,
    dataset: &VoltageGridDataset,
    target: Target,
) -> Result<SplitMape, EvalError> {
    let train = target_mape(
        target,
        &predict(net, &dataset.train),
        &dataset.train_field(target),
    )?;
    let test = if dataset.test.is_empty() {
        None
    } else {
        Some(target_mape(
            target,
            &predict(net, &dataset.test),
            &dataset.test_field(target),
        )?)
    };
    Ok(SplitMape { train, test })
}

/// Drain current and its first two gate derivatives along one V_G sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeSweep {
    pub v_d: f64,
    pub v_g: Vec<f64>,
    pub i_d: Vec<f64>,
    pub g_m: Vec<f64>,
    pub g_m2: Vec<f64>,
}

impl DerivativeSweep {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("V_G,I_D,g_m,g_m2\n");
        for i in 0..self.v_g.len() {
            let _ = writeln!(
                s,
                "{:.6},{:.16e},{:.16e},{:.16e}",
                self.v_g[i], self.i_d[i], self.g_m[i], self.g_m2[i]
            );
        }
        s
    }
}

/// Samples `current(v_d, v_g)` (amperes) on a V_G axis with `resolution_mv`
/// spacing and differentiates it with the same stencils used for training.
pub fn derivative_sweep_fn<F>(
    current: F,
    v_d: f64,
    resolution_mv: f64,
) -> Result<DerivativeSweep, EvalError>
where
    F: Fn(f64, f64) -> f64,
{
    if !(0.0..=V_MAX).contains(&v_d) {
        return Err(EvalError::Voltage(v_d));
    }
    if !(resolution_mv.is_finite() && resolution_mv > 0.0) {
        return Err(EvalError::Resolution);
    }
    let n = (V_MAX * 1000.0 / resolution_mv).round() as usize + 1;
    let v_g: Vec<f64> = (0..n)
        .map(|i| (i as f64 * resolution_mv / 1000.0).min(V_MAX))
        .collect();
    let i_d: Vec<f64> = v_g.iter().map(|&g| current(v_d, g)).collect();
    let grid = RectGrid {
        v_d: vec![v_d],
        v_g: v_g.clone(),
    };
    let g_m = grid.derivative(&i_d, Axis::Vg, 1)?;
    let g_m2 = grid.derivative(&i_d, Axis::Vg, 2)?;
    Ok(DerivativeSweep {
        v_d,
        v_g,
        i_d,
        g_m,
        g_m2,
    })
}

/// Transconductance sweep of an `I_D` network.
pub fn derivative_sweep(
    net: &Network<f64>,
    v_d: f64,
    resolution_mv: f64,
) -> Result<DerivativeSweep, EvalError> {
    derivative_sweep_fn(
        |d, g| net.spec.conversion.apply(net.forward(&[d, g])),
        v_d,
        resolution_mv,
    )
}

/// Oscillation beyond a rise-fall shape: the total variation of the curve
/// minus the largest variation that a path of at most three alternating
/// monotone pieces between the curve's endpoints can account for. Zero for monotone and single-peak or single-valley
/// curves.
pub fn waviness(curve: &[f64]) -> f64 {
    let n = curve.len();
    if n < 3 {
        return 0.0;
    }
    let tv: f64 = curve.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    let (first, last) = (curve[0], curve[n - 1]);
    // best over i <= j of |f0 - fi| + |fi - fj| + |fj - fn|
    let mut best = 0.0f64;
    let mut plus = f64::NEG_INFINITY; // max_i |f0-fi| + fi
    let mut minus = f64::NEG_INFINITY; // max_i |f0-fi| - fi
    for &fj in curve {
        plus = plus.max((first - fj).abs() + fj);
        minus = minus.max((first - fj).abs() - fj);
        let through_j = (plus - fj).max(minus + fj);
        best = best.max(through_j + (fj - last).abs());
    }
    (tv - best).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Quartiles {
    /// Box-plot summary; `None` for an empty sample.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

/// One evaluated model inside a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub label: String,
    pub target: Target,
    pub seed: u64,
    pub mape: SplitMape,
    /// `(V_D, waviness of g_m')` for each sweep; empty for charge models.
    pub waviness: Vec<(f64, f64)>,
    #[serde(skip)]
    pub sweeps: Vec<DerivativeSweep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step_mv: u32,
    pub entries: Vec<ReportEntry>,
    pub train_stats: Option<Quartiles>,
    pub test_stats: Option<Quartiles>,
}

/// A model to evaluate together with how it should be labelled.
pub struct ReportInput<'a> {
    pub label: String,
    pub target: Target,
    pub seed: u64,
    pub network: &'a Network<f64>,
}

/// Evaluates every model on `dataset`: MAPE on both splits, plus g_m
/// sweeps at `sweep_vd` and their waviness for current models.
pub fn make_report(
    models: &[ReportInput<'_>],
    dataset: &VoltageGridDataset,
    sweep_vd: &[f64],
    resolution_mv: f64,
) -> Result<EvalReport, EvalError> {
    let mut entries = Vec::with_capacity(models.len());
    for m in models {
        let mape = dataset_mape(m.network, dataset, m.target)?;
        let mut sweeps = Vec::new();
        let mut wav = Vec::new();
        if !m.target.is_charge() {
            for &vd in sweep_vd {
                let s = derivative_sweep(m.network, vd, resolution_mv)?;
                wav.push((vd, waviness(&s.g_m2)));
                sweeps.push(s);
            }
        }
        entries.push(ReportEntry {
            label: m.label.clone(),
            target: m.target,
            seed: m.seed,
            mape,
            waviness: wav,
            sweeps,
        });
    }
    let train: Vec<f64> = entries.iter().map(|e| e.mape.train).collect();
    let test: Vec<f64> = entries.iter().filter_map(|e| e.mape.test).collect();
    Ok(EvalReport {
        step_mv: dataset.step_mv,
        train_stats: Quartiles::from_values(&train),
        test_stats: Quartiles::from_values(&test),
        entries,
    })
}

impl EvalReport {
    /// `label,target,step_mv,seed,train_mape,test_mape,waviness_0.4V,...`
    pub fn summary_csv(&self) -> String {
        let vds: Vec<f64> = self
            .entries
            .iter()
            .find(|e| !e.waviness.is_empty())
            .map(|e| e.waviness.iter().map(|w| w.0).collect())
            .unwrap_or_default();
        let mut s = String::from("label,target,step_mv,seed,train_mape,test_mape");
        for vd in &vds {
            let _ = write!(s, ",waviness_{vd}V");
        }
        s.push('\n');
        for e in &self.entries {
            let test = e.mape.test.map(|t| format!("{t:.10e}")).unwrap_or_default();
            let _ = write!(
                s,
                "{},{},{},{},{:.10e},{}",
                e.label, e.target, self.step_mv, e.seed, e.mape.train, test
            );
            for vd in &vds {
                let w = e
                    .waviness
                    .iter()
                    .find(|w| w.0 == *vd)
                    .map(|w| format!("{:.10e}", w.1));
                let _ = write!(s, ",{}", w.unwrap_or_default());
            }
            s.push('\n');
        }
        s
    }

    /// Writes `summary.csv`, `stats.csv` when there is more than one model,
    /// and one `curve_<label>_vd<V>.csv` per sweep. Returns the files written.
    pub fn write_files(&self, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let summary = dir.join("summary.csv");
        std::fs::write(&summary, self.summary_csv())?;
        written.push(summary);
        if self.entries.len() > 1 {
            let mut s = String::from("split,min,q1,median,q3,max\n");
            for (name, q) in [("train", self.train_stats), ("test", self.test_stats)] {
                if let Some(q) = q {
                    let _ = writeln!(
                        s,
                        "{name},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
                        q.min, q.q1, q.median, q.q3, q.max
                    );
                }
            }
            let path = dir.join("stats.csv");
            std::fs::write(&path, s)?;
            written.push(path);
        }
        for e in &self.entries {
            for sweep in &e.sweeps {
                let path = dir.join(format!("curve_{}_vd{:.2}.csv", e.label, sweep.v_d));
                std::fs::write(&path, sweep.to_csv())?;
                written.push(path);
            }
        }
        Ok(written)
    }
}
