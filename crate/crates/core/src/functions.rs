//! Univariate basic functions that a learned edge can be snapped to.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasicFunction {
    X,
    X2,
    X3,
    Inv,
    Inv2,
    Exp,
    Ln,
    Sin,
    Cos,
    Tan,
    Tanh,
    Atan,
    Abs,
    Sqrt,
}

/// Fitting library in tie-break order.
pub const LIBRARY: [BasicFunction; 14] = [
    BasicFunction::X,
    BasicFunction::X2,
    BasicFunction::X3,
    BasicFunction::Inv,
    BasicFunction::Inv2,
    BasicFunction::Exp,
    BasicFunction::Ln,
    BasicFunction::Sin,
    BasicFunction::Cos,
    BasicFunction::Tan,
    BasicFunction::Tanh,
    BasicFunction::Atan,
    BasicFunction::Abs,
    BasicFunction::Sqrt,
];

impl BasicFunction {
    pub fn name(self) -> &'static str {
        match self {
            Self::X => "x",
            Self::X2 => "x^2",
            Self::X3 => "x^3",
            Self::Inv => "1/x",
            Self::Inv2 => "1/x^2",
            Self::Exp => "exp",
            Self::Ln => "ln",
            Self::Sin => "sin",
            Self::Cos => "cos",
            Self::Tan => "tan",
            Self::Tanh => "tanh",
            Self::Atan => "atan",
            Self::Abs => "abs",
            Self::Sqrt => "sqrt",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        LIBRARY.iter().copied().find(|f| f.name() == name)
    }

    pub fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            Self::X => x,
            Self::X2 => x * x,
            Self::X3 => x * x * x,
            Self::Inv => x.recip(),
            Self::Inv2 => (x * x).recip(),
            Self::Exp => x.exp(),
            Self::Ln => x.ln(),
            Self::Sin => x.sin(),
            Self::Cos => x.cos(),
            Self::Tan => x.tan(),
            Self::Tanh => x.tanh(),
            Self::Atan => x.atan(),
            Self::Abs => x.abs(),
            Self::Sqrt => x.sqrt(),
        }
    }

    pub fn deriv<T: Scalar>(self, x: T) -> T {
        let two = T::lit(2.0);
        match self {
            Self::X => T::one(),
            Self::X2 => two * x,
            Self::X3 => T::lit(3.0) * x * x,
            Self::Inv => -(x * x).recip(),
            Self::Inv2 => -two / (x * x * x),
            Self::Exp => x.exp(),
            Self::Ln => x.recip(),
            Self::Sin => x.cos(),
            Self::Cos => -x.sin(),
            Self::Tan => {
                let c = x.cos();
                (c * c).recip()
            }
            Self::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Self::Atan => (T::one() + x * x).recip(),
            Self::Abs => x.signum(),
            Self::Sqrt => (two * x.sqrt()).recip(),
        }
    }

    /// Renders `f(arg)` given the already-rendered argument.
    pub fn render(self, arg: &str) -> String {
        match self {
            Self::X => format!("({arg})"),
            Self::X2 => format!("({arg})^2"),
            Self::X3 => format!("({arg})^3"),
            Self::Inv => format!("1/({arg})"),
            Self::Inv2 => format!("1/({arg})^2"),
            other => format!("{}({arg})", other.name()),
        }
    }
}

impl fmt::Display for BasicFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for f in LIBRARY {
            for &x in &[0.3_f64, 0.7, 1.4, 2.2] {
                let fd = (f.eval(x + h) - f.eval(x - h)) / (2.0 * h);
                let an = f.deriv(x);
                assert!(
                    (fd - an).abs() / (an.abs() + 1e-12) < 1e-5,
                    "{f} at {x}: {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for f in LIBRARY {
            assert_eq!(BasicFunction::from_name(f.name()), Some(f));
        }
        assert_eq!(BasicFunction::from_name("erf"), None);
    }
}
