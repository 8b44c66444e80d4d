//! Analytical FinFET-like surrogate device and the voltage-grid datasets
//! built from it.
//!
//! Charges are carried in units of 1e-18 F throughout, so `Q_S = -34.2`
//! means -3.42e-17 F.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffengine::SparseOp;

/// Upper end of both voltage sweeps.
pub const V_MAX: f64 = 0.82;
/// Spacing of the master grid every dataset is cut from.
pub const MASTER_STEP_MV: u32 = 5;
pub const SUPPORTED_STEPS_MV: [u32; 4] = [5, 10, 20, 50];

const THERMAL_VOLTAGE: f64 = 0.0258;
const THRESHOLD_VOLTAGE: f64 = 0.25;
const IDEALITY: f64 = 1.2;
const TRANSCONDUCTANCE: f64 = 5e-3;
const CHARGE_SCALE: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DeviceError {
    #[error("voltage V_D={v_d}, V_G={v_g} outside [0, {V_MAX}] V")]
    Domain { v_d: f64, v_g: f64 },
    #[error("unsupported grid step {0} mV (expected one of 5, 10, 20, 50)")]
    UnsupportedStep(u32),
    #[error("grid needs at least 3 points along {axis}, found {len}")]
    GridTooSmall { axis: Axis, len: usize },
    #[error("points do not form a full rectangular grid")]
    NotRectangular,
    #[error("derivative order {0} not supported (expected 1 or 2)")]
    DerivativeOrder(usize),
    #[error("field has {got} values, grid has {expected} points")]
    FieldLength { expected: usize, got: usize },
    #[error("dataset file: {0}")]
    Format(String),
    #[error("dataset io: {0}")]
    Io(String),
}

impl From<csv::Error> for DeviceError {
    fn from(e: csv::Error) -> Self {
        DeviceError::Io(e.to_string())
    }
}

/// Quantity a network is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    #[serde(rename = "I_D")]
    Id,
    #[serde(rename = "Q_D")]
    Qd,
    #[serde(rename = "Q_S")]
    Qs,
    #[serde(rename = "Q_G")]
    Qg,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Id, Target::Qd, Target::Qs, Target::Qg];

    pub fn name(self) -> &'static str {
        match self {
            Target::Id => "I_D",
            Target::Qd => "Q_D",
            Target::Qs => "Q_S",
            Target::Qg => "Q_G",
        }
    }

    pub fn is_charge(self) -> bool {
        self != Target::Id
    }

    pub fn value(self, p: &DevicePoint) -> f64 {
        match self {
            Target::Id => p.i_d,
            Target::Qd => p.q_d,
            Target::Qs => p.q_s,
            Target::Qg => p.q_g,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "I_D" | "ID" => Ok(Target::Id),
            "Q_D" | "QD" => Ok(Target::Qd),
            "Q_S" | "QS" => Ok(Target::Qs),
            "Q_G" | "QG" => Ok(Target::Qg),
            _ => Err(format!("unknown target '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "V_D")]
    Vd,
    #[serde(rename = "V_G")]
    Vg,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Vd => "V_D",
            Axis::Vg => "V_G",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevicePoint {
    pub v_d: f64,
    pub v_g: f64,
    /// Amperes.
    pub i_d: f64,
    pub q_d: f64,
    pub q_s: f64,
    pub q_g: f64,
}

impl DevicePoint {
    /// Bulk charge from charge neutrality, `-(Q_D + Q_S + Q_G)`.
    pub fn q_b(&self) -> f64 {
        -(self.q_d + self.q_s + self.q_g)
    }
}

/// Smoothed overdrive `n v_t ln(1 + exp((V_G - V_th) / (n v_t)))`.
pub fn overdrive(v_g: f64) -> f64 {
    let nvt = IDEALITY * THERMAL_VOLTAGE;
    let z = (v_g - THRESHOLD_VOLTAGE) / nvt;
    // ln(1 + e^z) without overflow
    let softplus = if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    nvt * softplus
}

pub fn surrogate_eval(v_d: f64, v_g: f64) -> Result<DevicePoint, DeviceError> {
    let in_range = |v: f64| (0.0..=V_MAX + 1e-12).contains(&v);
    if !(in_range(v_d) && in_range(v_g)) {
        return Err(DeviceError::Domain { v_d, v_g });
    }
    let f = overdrive(v_g);
    let i_d = TRANSCONDUCTANCE * f * f * (v_d / (0.08 + 0.6 * f)).tanh();
    let q_s = -CHARGE_SCALE * f;
    let q_d = -CHARGE_SCALE * f * (0.35 + 0.25 * ((v_d - 0.3) / 0.2).tanh());
    let q_g = -(q_s + q_d) * 1.5;
    Ok(DevicePoint {
        v_d,
        v_g,
        i_d,
        q_d,
        q_s,
        q_g,
    })
}

/// Bulk charge of the surrogate in closed form. Equal to
/// `-(Q_D + Q_S + Q_G)` because `Q_G = -1.5 (Q_S + Q_D)`.
pub fn surrogate_bulk_charge(v_d: f64, v_g: f64) -> Result<f64, DeviceError> {
    let p = surrogate_eval(v_d, v_g)?;
    Ok(0.5 * (p.q_s + p.q_d))
}

pub fn convert_current(y_i: f64) -> f64 {
    y_i.exp()
}

pub fn convert_charge(y_q: f64) -> f64 {
    y_q * 1e-18
}

/// Full rectangular grid, V_D-major: point `(i, j)` sits at `i * n_g + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectGrid {
    pub v_d: Vec<f64>,
    pub v_g: Vec<f64>,
}

impl RectGrid {
    pub fn len(&self) -> usize {
        self.v_d.len() * self.v_g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i_d: usize, i_g: usize) -> usize {
        i_d * self.v_g.len() + i_g
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.v_d
            .iter()
            .flat_map(move |&d| self.v_g.iter().map(move |&g| (d, g)))
    }

    fn axis(&self, axis: Axis) -> &[f64] {
        match axis {
            Axis::Vd => &self.v_d,
            Axis::Vg => &self.v_g,
        }
    }

    /// Linear map from a field on the grid to its derivative along `axis`:
    /// central differences inside, second-order one-sided stencils at the
    /// edges. Order 2 applies the same stencils twice.
    pub fn derivative_operator(
        &self,
        axis: Axis,
        order: usize,
    ) -> Result<SparseOp<f64>, DeviceError> {
        let ax = self.axis(axis);
        if ax.len() < 3 {
            return Err(DeviceError::GridTooSmall {
                axis,
                len: ax.len(),
            });
        }
        let first = self.first_derivative(axis);
        Ok(match order {
            1 => first,
            2 => first.compose(&first),
            other => return Err(DeviceError::DerivativeOrder(other)),
        })
    }

    fn first_derivative(&self, axis: Axis) -> SparseOp<f64> {
        let (nd, ng) = (self.v_d.len(), self.v_g.len());
        let ax = self.axis(axis);
        let n = ax.len();
        let h = (ax[n - 1] - ax[0]) / (n - 1) as f64;
        let inv2h = 1.0 / (2.0 * h);
        let mut rows = Vec::with_capacity(nd * ng);
        for i in 0..nd {
            for j in 0..ng {
                let (pos, at): (usize, Box<dyn Fn(usize) -> usize>) = match axis {
                    Axis::Vd => (i, Box::new(move |t| t * ng + j)),
                    Axis::Vg => (j, Box::new(move |t| i * ng + t)),
                };
                let row = if pos == 0 {
                    vec![(at(0), -3.0 * inv2h), (at(1), 4.0 * inv2h), (at(2), -inv2h)]
                } else if pos == n - 1 {
                    vec![
                        (at(n - 3), inv2h),
                        (at(n - 2), -4.0 * inv2h),
                        (at(n - 1), 3.0 * inv2h),
                    ]
                } else {
                    vec![(at(pos - 1), -inv2h), (at(pos + 1), inv2h)]
                };
                rows.push(row);
            }
        }
        SparseOp {
            in_rows: nd * ng,
            rows,
        }
    }

    /// Derivative of a tabulated field along `axis`.
    pub fn derivative(
        &self,
        field: &[f64],
        axis: Axis,
        order: usize,
    ) -> Result<Vec<f64>, DeviceError> {
        if field.len() != self.len() {
            return Err(DeviceError::FieldLength {
                expected: self.len(),
                got: field.len(),
            });
        }
        Ok(self.derivative_operator(axis, order)?.apply(field))
    }

    /// Recovers the grid behind a V_D-major list of points.
    pub fn from_points(points: &[DevicePoint]) -> Result<Self, DeviceError> {
        let mut v_d: Vec<f64> = Vec::new();
        for p in points {
            if v_d.last() != Some(&p.v_d) {
                v_d.push(p.v_d);
            }
        }
        if v_d.is_empty() || !points.len().is_multiple_of(v_d.len()) {
            return Err(DeviceError::NotRectangular);
        }
        let ng = points.len() / v_d.len();
        let v_g: Vec<f64> = points[..ng].iter().map(|p| p.v_g).collect();
        for (i, &d) in v_d.iter().enumerate() {
            for (j, &g) in v_g.iter().enumerate() {
                let p = &points[i * ng + j];
                if p.v_d != d || p.v_g != g {
                    return Err(DeviceError::NotRectangular);
                }
            }
        }
        Ok(Self { v_d, v_g })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageGridDataset {
    pub step_mv: u32,
    /// Points on the `step_mv` sub-grid, V_D-major.
    pub train: Vec<DevicePoint>,
    /// Remaining points of the 5 mV master grid.
    pub test: Vec<DevicePoint>,
    pub grid: RectGrid,
}

fn millivolts(mv: u32) -> f64 {
    mv as f64 / 1000.0
}

/// Number of 5 mV master-grid points per axis (0 .. 0.82 V inclusive).
pub fn master_axis_len() -> usize {
    (V_MAX * 1000.0).round() as usize / MASTER_STEP_MV as usize + 1
}

pub fn generate_dataset(step_mv: u32) -> Result<VoltageGridDataset, DeviceError> {
    if !SUPPORTED_STEPS_MV.contains(&step_mv) {
        return Err(DeviceError::UnsupportedStep(step_mv));
    }
    let n = master_axis_len();
    let stride = (step_mv / MASTER_STEP_MV) as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let v_d = millivolts(i as u32 * MASTER_STEP_MV);
            let v_g = millivolts(j as u32 * MASTER_STEP_MV);
            let p = surrogate_eval(v_d, v_g)?;
            if i % stride == 0 && j % stride == 0 {
                train.push(p);
            } else {
                test.push(p);
            }
        }
    }
    let grid = RectGrid::from_points(&train)?;
    Ok(VoltageGridDataset {
        step_mv,
        train,
        test,
        grid,
    })
}

impl VoltageGridDataset {
    pub fn train_field(&self, target: Target) -> Vec<f64> {
        self.train.iter().map(|p| target.value(p)).collect()
    }

    pub fn test_field(&self, target: Target) -> Vec<f64> {
        self.test.iter().map(|p| target.value(p)).collect()
    }

    /// Every point, train first.
    pub fn all_points(&self) -> impl Iterator<Item = &DevicePoint> {
        self.train.iter().chain(self.test.iter())
    }

    /// Derivative of a target over the train sub-grid.
    pub fn grid_derivative(
        &self,
        target: Target,
        axis: Axis,
        order: usize,
    ) -> Result<Vec<f64>, DeviceError> {
        self.grid.derivative(&self.train_field(target), axis, order)
    }

    /// Writes `V_D,V_G,I_D,Q_D,Q_S,Q_G,split` rows in master-grid order
    /// with 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DeviceError> {
        let mut rows: Vec<(&DevicePoint, Split)> = self
            .train
            .iter()
            .map(|p| (p, Split::Train))
            .chain(self.test.iter().map(|p| (p, Split::Test)))
            .collect();
        rows.sort_by(|a, b| (a.0.v_d, a.0.v_g).partial_cmp(&(b.0.v_d, b.0.v_g)).unwrap());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["V_D", "V_G", "I_D", "Q_D", "Q_S", "Q_G", "split"])?;
        for (p, s) in rows {
            let f = |v: f64| format!("{v:.16e}");
            w.write_record([
                f(p.v_d),
                f(p.v_g),
                f(p.i_d),
                f(p.q_d),
                f(p.q_s),
                f(p.q_g),
                match s {
                    Split::Train => "train".to_string(),
                    Split::Test => "test".to_string(),
                },
            ])?;
        }
        w.flush().map_err(|e| DeviceError::Io(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, DeviceError> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let expected = ["V_D", "V_G", "I_D", "Q_D", "Q_S", "Q_G", "split"];
        if header.iter().ne(expected.iter().copied()) {
            return Err(DeviceError::Format(format!("unexpected header {header:?}")));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64, DeviceError> {
                rec[i].trim().parse::<f64>().map_err(|e| {
                    DeviceError::Format(format!("row {}: column {}: {e}", line + 2, expected[i]))
                })
            };
            let p = DevicePoint {
                v_d: num(0)?,
                v_g: num(1)?,
                i_d: num(2)?,
                q_d: num(3)?,
                q_s: num(4)?,
                q_g: num(5)?,
            };
            match rec[6].trim() {
                "train" => train.push(p),
                "test" => test.push(p),
                other => {
                    return Err(DeviceError::Format(format!(
                        "row {}: bad split '{other}'",
                        line + 2
                    )))
                }
            }
        }
        let grid = RectGrid::from_points(&train)?;
        let step_mv = if grid.v_d.len() > 1 {
            ((grid.v_d[1] - grid.v_d[0]) * 1000.0).round() as u32
        } else {
            0
        };
        Ok(Self {
            step_mv,
            train,
            test,
            grid,
        })
    }
}
