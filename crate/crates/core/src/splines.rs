//! Uniform B-spline bases and the learnable edge activation built on them.
//!
//! A [`KnotVector`] with `G` cells of order `k` on `[lo, hi]` carries
//! `G + 2k + 1` knots (the domain extended by `k` steps on each side) and
//! spans `G + k` basis functions. Evaluation runs the Cox-de Boor
//! triangle on the cell containing `x`; outside the domain the boundary
//! cell is reused, so the first and last polynomial pieces extend
//! smoothly instead of being clamped.

use serde::{Deserialize, Serialize};

use crate::linalg::{lstsq, LstsqError};
use crate::scalar::{silu, silu_deriv, Scalar};

/// Highest spline order accepted. Local bases live on the stack.
pub const MAX_SPLINE_ORDER: usize = 7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SplineError {
    #[error("grid size must be at least 1")]
    EmptyGrid,
    #[error("spline order {0} exceeds the supported maximum {MAX_SPLINE_ORDER}")]
    OrderTooLarge(usize),
    #[error("invalid domain [{lo}, {hi}]")]
    InvalidDomain { lo: f64, hi: f64 },
    #[error("cannot refine from G={from} down to G={to}")]
    Coarsening { from: usize, to: usize },
    #[error("coefficient vector has length {got}, expected {expected}")]
    CoeffLength { expected: usize, got: usize },
    #[error("refinement failed: {0}")]
    Refinement(#[from] LstsqError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct KnotVector<T: Scalar> {
    lo: T,
    hi: T,
    grid: usize,
    order: usize,
    knots: Vec<T>,
}

/// The `order + 1` basis functions that may be nonzero at one point.
#[derive(Debug, Clone, Copy)]
pub struct LocalBasis<T: Scalar> {
    /// Index of the first entry in the global basis.
    pub first: usize,
    pub len: usize,
    pub values: [T; MAX_SPLINE_ORDER + 1],
    pub derivs: [T; MAX_SPLINE_ORDER + 1],
}

impl<T: Scalar> LocalBasis<T> {
    pub fn dot(&self, coeffs: &[T]) -> T {
        let mut s = T::zero();
        for r in 0..self.len {
            s += self.values[r] * coeffs[self.first + r];
        }
        s
    }

    pub fn dot_deriv(&self, coeffs: &[T]) -> T {
        let mut s = T::zero();
        for r in 0..self.len {
            s += self.derivs[r] * coeffs[self.first + r];
        }
        s
    }
}

impl<T: Scalar> KnotVector<T> {
    pub fn uniform(lo: T, hi: T, grid: usize, order: usize) -> Result<Self, SplineError> {
        if grid == 0 {
            return Err(SplineError::EmptyGrid);
        }
        if order > MAX_SPLINE_ORDER {
            return Err(SplineError::OrderTooLarge(order));
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(SplineError::InvalidDomain {
                lo: lo.to_f64_lossy(),
                hi: hi.to_f64_lossy(),
            });
        }
        let h = (hi - lo) / T::from_usize_lossy(grid);
        let knots = (0..grid + 2 * order + 1)
            .map(|i| {
                // i - order may be negative
                let offset = T::from_usize_lossy(i) - T::from_usize_lossy(order);
                lo + offset * h
            })
            .collect();
        Ok(Self {
            lo,
            hi,
            grid,
            order,
            knots,
        })
    }

    /// Knots on `[0, 1]`, the normalised input range of every network edge.
    pub fn unit(grid: usize, order: usize) -> Result<Self, SplineError> {
        Self::uniform(T::zero(), T::one(), grid, order)
    }

    pub fn lo(&self) -> T {
        self.lo
    }

    pub fn hi(&self) -> T {
        self.hi
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    pub fn num_basis(&self) -> usize {
        self.grid + self.order
    }

    pub fn spacing(&self) -> T {
        (self.hi - self.lo) / T::from_usize_lossy(self.grid)
    }

    /// Cell index in `0..grid`, with out-of-domain points assigned to the
    /// boundary cells.
    fn cell(&self, x: T) -> usize {
        let t = ((x - self.lo) / self.spacing()).floor();
        if !(t > T::zero()) {
            0
        } else {
            t.to_usize().unwrap_or(usize::MAX).min(self.grid - 1)
        }
    }

    /// Nonzero basis values and their derivatives at `x`.
    ///
    /// Runs the Cox-de Boor triangle once; on a uniform grid every
    /// denominator at level `j` equals `j h`, and the level `k - 1` row gives
    /// the derivatives through `B'_{i,k} = (B_{i,k-1} - B_{i+1,k-1}) / h`.
    pub fn local_basis(&self, x: T) -> LocalBasis<T> {
        let k = self.order;
        let cell = self.cell(x);
        if k == 3 {
            return self.cubic_basis(x, cell);
        }
        let span = cell + k;
        let u = &self.knots;
        let inv_h = T::one() / self.spacing();
        let mut values = [T::zero(); MAX_SPLINE_ORDER + 1];
        let mut derivs = [T::zero(); MAX_SPLINE_ORDER + 1];
        let mut lower = [T::zero(); MAX_SPLINE_ORDER + 1];
        let mut left = [T::zero(); MAX_SPLINE_ORDER + 1];
        let mut right = [T::zero(); MAX_SPLINE_ORDER + 1];
        values[0] = T::one();
        for j in 1..=k {
            if j == k {
                lower = values;
            }
            left[j] = x - u[span + 1 - j];
            right[j] = u[span + j] - x;
            let inv = inv_h / T::from_usize_lossy(j);
            let mut saved = T::zero();
            for r in 0..j {
                let tmp = values[r] * inv;
                values[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            values[j] = saved;
        }
        if k > 0 {
            // lower[r] belongs to global index cell + 1 + r
            for r in 0..=k {
                let a = if r >= 1 { lower[r - 1] } else { T::zero() };
                let b = if r < k { lower[r] } else { T::zero() };
                derivs[r] = (a - b) * inv_h;
            }
        }
        LocalBasis {
            first: cell,
            len: k + 1,
            values,
            derivs,
        }
    }

    /// Uniform cubic pieces in closed form, in terms of the position `t` of
    /// `x` within its cell (`t` leaves `[0, 1]` when extrapolating).
    fn cubic_basis(&self, x: T, cell: usize) -> LocalBasis<T> {
        let inv_h = T::one() / self.spacing();
        let t = (x - self.knots[cell + 3]) * inv_h;
        let s = T::one() - t;
        let (t2, s2) = (t * t, s * s);
        let sixth = T::lit(1.0 / 6.0);
        let half = T::lit(0.5);
        let (two, three, four) = (T::lit(2.0), T::lit(3.0), T::lit(4.0));
        let mut values = [T::zero(); MAX_SPLINE_ORDER + 1];
        let mut derivs = [T::zero(); MAX_SPLINE_ORDER + 1];
        values[0] = s2 * s * sixth;
        values[1] = (three * t2 * t - T::lit(6.0) * t2 + four) * sixth;
        values[2] = (-three * t2 * t + three * t2 + three * t + T::one()) * sixth;
        values[3] = t2 * t * sixth;
        derivs[0] = -half * s2 * inv_h;
        derivs[1] = (three * t2 - four * t) * half * inv_h;
        derivs[2] = (-three * t2 + two * t + T::one()) * half * inv_h;
        derivs[3] = half * t2 * inv_h;
        LocalBasis {
            first: cell,
            len: 4,
            values,
            derivs,
        }
    }

    /// All `G + k` basis values at `x`.
    pub fn basis_eval(&self, x: T) -> Vec<T> {
        let mut out = vec![T::zero(); self.num_basis()];
        let lb = self.local_basis(x);
        out[lb.first..lb.first + lb.len].copy_from_slice(&lb.values[..lb.len]);
        out
    }

    /// All `G + k` basis derivatives at `x`.
    pub fn basis_deriv(&self, x: T) -> Vec<T> {
        let mut out = vec![T::zero(); self.num_basis()];
        let lb = self.local_basis(x);
        out[lb.first..lb.first + lb.len].copy_from_slice(&lb.derivs[..lb.len]);
        out
    }
}

/// One learnable edge function `w_b silu(x) + w_s sum_i c_i B_i(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SplineActivation<T: Scalar> {
    pub knots: KnotVector<T>,
    pub coeffs: Vec<T>,
    pub w_b: T,
    pub w_s: T,
}

impl<T: Scalar> SplineActivation<T> {
    pub fn new(knots: KnotVector<T>, coeffs: Vec<T>, w_b: T, w_s: T) -> Result<Self, SplineError> {
        if coeffs.len() != knots.num_basis() {
            return Err(SplineError::CoeffLength {
                expected: knots.num_basis(),
                got: coeffs.len(),
            });
        }
        Ok(Self {
            knots,
            coeffs,
            w_b,
            w_s,
        })
    }

    pub fn grid(&self) -> usize {
        self.knots.grid()
    }

    /// `sum_i c_i B_i(x)` without the base branch or `w_s`.
    pub fn spline_part(&self, x: T) -> T {
        self.knots.local_basis(x).dot(&self.coeffs)
    }

    pub fn eval(&self, x: T) -> T {
        self.w_b * silu(x) + self.w_s * self.spline_part(x)
    }

    pub fn deriv(&self, x: T) -> T {
        let lb = self.knots.local_basis(x);
        self.w_b * silu_deriv(x) + self.w_s * lb.dot_deriv(&self.coeffs)
    }

    /// Re-expresses the spline on a grid with `new_grid` cells over the same
    /// domain, choosing coefficients by least squares against the current
    /// spline on `10 (new_grid + k)` uniform samples. Base weights are kept.
    pub fn refine(&self, new_grid: usize) -> Result<Self, SplineError> {
        self.refine_with(new_grid, &[])
    }

    /// [`SplineActivation::refine`] with `extra` points added to the
    /// least-squares samples, typically the inputs the edge actually sees.
    /// When the grids are nested the fit is exact either way; otherwise the
    /// extra points keep the new spline close where it is used, including
    /// outside the knot domain.
    pub fn refine_with(&self, new_grid: usize, extra: &[T]) -> Result<Self, SplineError> {
        let old = self.knots.grid();
        if new_grid < old {
            return Err(SplineError::Coarsening {
                from: old,
                to: new_grid,
            });
        }
        let knots = KnotVector::uniform(
            self.knots.lo(),
            self.knots.hi(),
            new_grid,
            self.knots.order(),
        )?;
        let cols = knots.num_basis();
        let uniform = 10 * cols;
        let span = self.knots.hi() - self.knots.lo();
        let denom = T::from_usize_lossy(uniform - 1);
        let xs: Vec<T> = (0..uniform)
            .map(|i| self.knots.lo() + span * T::from_usize_lossy(i) / denom)
            .chain(extra.iter().copied())
            .collect();
        let rows = xs.len();
        let mut a = vec![T::zero(); rows * cols];
        let mut b = vec![T::zero(); rows];
        for (i, &x) in xs.iter().enumerate() {
            let lb = knots.local_basis(x);
            for r in 0..lb.len {
                a[i * cols + lb.first + r] = lb.values[r];
            }
            b[i] = self.spline_part(x);
        }
        let coeffs = lstsq(&a, rows, cols, &b)?;
        Ok(Self {
            knots,
            coeffs,
            w_b: self.w_b,
            w_s: self.w_s,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook recursive definition on half-open knot intervals. Only valid
    /// inside the domain, which is all the comparison needs.
    fn cox_de_boor(knots: &[f64], i: usize, k: usize, x: f64) -> f64 {
        if k == 0 {
            return if knots[i] <= x && x < knots[i + 1] {
                1.0
            } else {
                0.0
            };
        }
        let a = (x - knots[i]) / (knots[i + k] - knots[i]) * cox_de_boor(knots, i, k - 1, x);
        let b = (knots[i + k + 1] - x) / (knots[i + k + 1] - knots[i + 1])
            * cox_de_boor(knots, i + 1, k - 1, x);
        a + b
    }

    fn random_act(grid: usize, seed: u64) -> SplineActivation<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let knots = KnotVector::unit(grid, 3).unwrap();
        let coeffs = (0..knots.num_basis())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        SplineActivation::new(
            knots,
            coeffs,
            rng.random_range(-1.0..1.0),
            rng.random_range(0.5..1.5),
        )
        .unwrap()
    }

    #[test]
    fn knot_vector_layout() {
        let kv = KnotVector::<f64>::unit(5, 3).unwrap();
        assert_eq!(kv.knots().len(), 5 + 2 * 3 + 1);
        assert_eq!(kv.num_basis(), 8);
        assert!((kv.knots()[3] - 0.0).abs() < 1e-15);
        assert!((kv.knots()[8] - 1.0).abs() < 1e-15);
        for w in kv.knots().windows(2) {
            assert!(w[1] > w[0]);
            assert!((w[1] - w[0] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn order_zero_is_cell_indicator() {
        let kv = KnotVector::<f64>::unit(4, 0).unwrap();
        for j in 0..4 {
            let x = (j as f64 + 0.5) / 4.0;
            let b = kv.basis_eval(x);
            for (i, v) in b.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn linear_hat_peaks_on_its_knot() {
        let kv = KnotVector::<f64>::unit(4, 1).unwrap();
        // interior knot 0.5 is the peak of basis index 2 (support [0.25, 0.75])
        let b = kv.basis_eval(0.5);
        assert!((b[2] - 1.0).abs() < 1e-15);
        assert!(b.iter().enumerate().all(|(i, v)| i == 2 || v.abs() < 1e-15));
    }

    #[test]
    fn matches_recursive_definition() {
        for k in 0..=4 {
            let kv = KnotVector::<f64>::unit(6, k).unwrap();
            for s in 0..97 {
                let x = s as f64 / 97.0 + 1e-9;
                let fast = kv.basis_eval(x);
                for (i, v) in fast.iter().enumerate() {
                    let slow = cox_de_boor(kv.knots(), i, k, x);
                    assert!((v - slow).abs() < 1e-12, "k={k} i={i} x={x}");
                }
            }
        }
    }

    #[test]
    fn spline_eval_examples() {
        let kv = KnotVector::<f64>::unit(5, 3).unwrap();
        let mut act = SplineActivation::new(kv.clone(), vec![0.3; 8], 1.0, 0.0).unwrap();
        assert_eq!(act.eval(0.0), 0.0);
        act.coeffs = vec![1.0; 8];
        act.w_b = 0.0;
        act.w_s = 1.0;
        for x in [0.1, 0.37, 0.5, 0.93] {
            assert!((act.eval(x) - 1.0).abs() < 1e-12);
        }
        act.w_b = 2.0;
        act.w_s = 0.0;
        let expected = 2.0 * 10.0 / (1.0 + (-10.0f64).exp());
        assert!((act.eval(10.0) - expected).abs() < 1e-12);
        assert!((act.eval(10.0) - 19.999).abs() < 1e-3);
    }

    #[test]
    fn spline_deriv_examples() {
        let kv = KnotVector::<f64>::unit(5, 3).unwrap();
        let act = SplineActivation::new(kv.clone(), vec![0.7; 8], 1.0, 0.0).unwrap();
        assert!((act.deriv(0.0) - 0.5).abs() < 1e-15);
        let flat = SplineActivation::new(kv, vec![0.7; 8], 0.0, 1.3).unwrap();
        for x in [0.05, 0.33, 0.8] {
            assert!(flat.deriv(x).abs() < 1e-12);
        }
        let act = random_act(7, 11);
        let h = 1e-6;
        for s in 0..50 {
            let x = -0.2 + 1.4 * s as f64 / 49.0 + 0.0031;
            let fd = (act.eval(x + h) - act.eval(x - h)) / (2.0 * h);
            assert!((fd - act.deriv(x)).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn extrapolation_continues_boundary_piece() {
        let act = random_act(4, 3);
        // value and slope continuous across the domain edge
        let eps = 1e-9;
        assert!((act.eval(-eps) - act.eval(eps)).abs() < 1e-7);
        assert!((act.eval(1.0 - eps) - act.eval(1.0 + eps)).abs() < 1e-7);
        assert!((act.deriv(1.0 - eps) - act.deriv(1.0 + eps)).abs() < 1e-6);
        assert!(act.eval(3.0).is_finite() && act.eval(-2.0).is_finite());
    }

    #[test]
    fn refine_constant_and_identity() {
        let kv = KnotVector::<f64>::unit(2, 3).unwrap();
        let c = SplineActivation::new(kv, vec![0.42; 5], 0.3, 1.0).unwrap();
        let r = c.refine(4).unwrap();
        assert_eq!(r.coeffs.len(), 7);
        assert_eq!((r.w_b, r.w_s), (0.3, 1.0));
        for s in 0..101 {
            let x = s as f64 / 100.0;
            assert!((r.spline_part(x) - 0.42).abs() < 1e-10);
        }
        let act = random_act(6, 5);
        let same = act.refine(6).unwrap();
        for (a, b) in act.coeffs.iter().zip(&same.coeffs) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn refine_nested_grid_is_exact() {
        let act = random_act(2, 9);
        let fine = act.refine(4).unwrap();
        let finer = fine.refine(8).unwrap();
        for s in 0..=1000 {
            let x = s as f64 / 1000.0;
            assert!((fine.eval(x) - act.eval(x)).abs() < 1e-8);
            assert!((finer.eval(x) - act.eval(x)).abs() < 1e-8);
        }
        // exactness extends past the domain because the boundary pieces coincide
        assert!((finer.eval(1.3) - act.eval(1.3)).abs() < 1e-8);
    }

    #[test]
    fn refine_with_extra_points() {
        // nested: extra points change nothing
        let act = random_act(4, 21);
        let extra: Vec<f64> = (0..40).map(|i| -0.5 + 2.0 * i as f64 / 39.0).collect();
        let fine = act.refine_with(8, &extra).unwrap();
        for &x in &extra {
            assert!((fine.eval(x) - act.eval(x)).abs() < 1e-8);
        }
        // non-nested: weighting the points an edge sees shrinks the error there
        let act = random_act(8, 22);
        let seen: Vec<f64> = (0..200).map(|i| 1.0 + 0.4 * i as f64 / 199.0).collect();
        let worst = |r: &SplineActivation<f64>| {
            seen.iter()
                .map(|&x| (r.eval(x) - act.eval(x)).abs())
                .fold(0.0, f64::max)
        };
        let plain = worst(&act.refine(12).unwrap());
        let aware = worst(&act.refine_with(12, &seen).unwrap());
        assert!(aware < plain, "{aware} vs {plain}");
    }

    #[test]
    fn refine_rejects_coarsening() {
        let act = random_act(8, 1);
        assert!(matches!(
            act.refine(4),
            Err(SplineError::Coarsening { from: 8, to: 4 })
        ));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(KnotVector::<f64>::unit(0, 3).is_err());
        assert!(KnotVector::<f64>::unit(3, 9).is_err());
        assert!(KnotVector::<f64>::uniform(1.0, 1.0, 3, 3).is_err());
        let kv = KnotVector::<f64>::unit(3, 3).unwrap();
        assert!(SplineActivation::new(kv, vec![0.0; 5], 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_local_support(x in 0.0f64..=1.0, grid in 1usize..20, k in 0usize..=5) {
            let kv = KnotVector::<f64>::unit(grid, k).unwrap();
            let b = kv.basis_eval(x);
            let sum: f64 = b.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(b.iter().filter(|v| **v != 0.0).count() <= k + 1);
        }

        #[test]
        fn derivative_matches_finite_differences(seed in 0u64..1000, x in 0.0f64..1.0) {
            let act = random_act(5, seed);
            // stay clear of knots where the third derivative jumps
            let h_knot = 0.2;
            let frac = (x / h_knot).fract();
            prop_assume!(frac > 1e-3 && frac < 1.0 - 1e-3);
            let h = 1e-6;
            let fd = (act.eval(x + h) - act.eval(x - h)) / (2.0 * h);
            let an = act.deriv(x);
            prop_assert!((fd - an).abs() / (an.abs() + 1e-12) < 1e-5 || (fd - an).abs() < 1e-8);
        }
    }
}
