//! Straight-line reimplementations of the three forward passes, written
//! against the raw parameter arrays rather than the library's evaluators.

#![allow(dead_code)]

use kanc_core::networks::{KanEdge, Layers};
use kanc_core::Network;

/// Degree-`k` B-spline `i` on `knots`, evaluated with the polynomial piece
/// that lives on knot span `span`. Forcing the span extends the boundary
/// pieces past the knot range, which is how edge functions extrapolate.
pub fn bspline_on_span(knots: &[f64], i: usize, k: usize, span: usize, x: f64) -> f64 {
    if k == 0 {
        return if i == span { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = knots[i + k] - knots[i];
    if d1 != 0.0 {
        v += (x - knots[i]) / d1 * bspline_on_span(knots, i, k - 1, span, x);
    }
    let d2 = knots[i + k + 1] - knots[i + 1];
    if d2 != 0.0 {
        v += (knots[i + k + 1] - x) / d2 * bspline_on_span(knots, i + 1, k - 1, span, x);
    }
    v
}

/// Span index (into the extended knot vector) whose piece defines the spline
/// at `x`; points outside `[lo, hi]` use the nearest boundary cell.
pub fn span_of(knots: &[f64], k: usize, grid: usize, x: f64) -> usize {
    let lo = knots[k];
    let hi = knots[k + grid];
    let mut cell = 0;
    for c in 0..grid {
        if x >= lo + (hi - lo) * c as f64 / grid as f64 {
            cell = c;
        }
    }
    cell + k
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn mlp_oracle(net: &Network, x: &[f64]) -> f64 {
    let Layers::Mlp(layers) = &net.layers else {
        panic!("not an MLP")
    };
    let mut h: Vec<f64> = x.iter().map(|v| v / net.spec.input_range).collect();
    for (l, layer) in layers.iter().enumerate() {
        let mut next = Vec::new();
        for o in 0..layer.out_width {
            let mut z = layer.bias[o];
            for (i, hi) in h.iter().enumerate() {
                z += layer.weights[i * layer.out_width + o] * hi;
            }
            next.push(if l + 1 < layers.len() { z.tanh() } else { z });
        }
        h = next;
    }
    h[0]
}

pub fn kan_oracle(net: &Network, x: &[f64]) -> f64 {
    let Layers::Kan(layers) = &net.layers else {
        panic!("not a KAN")
    };
    let mut h: Vec<f64> = x.iter().map(|v| v / net.spec.input_range).collect();
    for layer in layers {
        let mut next = Vec::new();
        for j in 0..layer.out_width {
            let mut s = layer.bias[j];
            for (i, &xi) in h.iter().enumerate() {
                s += match &layer.edges[j * layer.in_width + i] {
                    KanEdge::Spline(sp) => {
                        let knots = sp.knots.knots();
                        let k = sp.knots.order();
                        let span = span_of(knots, k, sp.knots.grid(), xi);
                        let spline: f64 = (0..sp.coeffs.len())
                            .map(|b| sp.coeffs[b] * bspline_on_span(knots, b, k, span, xi))
                            .sum();
                        sp.w_b * silu(xi) + sp.w_s * spline
                    }
                    KanEdge::Symbolic(e) => e.c * e.function.eval(e.a * xi + e.b) + e.d,
                };
            }
            next.push(s);
        }
        h = next;
    }
    h[0]
}

pub fn fkan_oracle(net: &Network, x: &[f64]) -> f64 {
    let Layers::Fkan(layers) = &net.layers else {
        panic!("not a Fourier KAN")
    };
    let mut h: Vec<f64> = x.iter().map(|v| v / net.spec.input_range).collect();
    for layer in layers {
        let g = layer.grid;
        let mut next = Vec::new();
        for j in 0..layer.out_width {
            let mut s = layer.bias[j];
            for (i, &xi) in h.iter().enumerate() {
                for k in 1..=g {
                    let a = layer.coeffs[2 * (i * g + k - 1) * layer.out_width + j];
                    let b = layer.coeffs[(2 * (i * g + k - 1) + 1) * layer.out_width + j];
                    s += a * (k as f64 * xi).cos() + b * (k as f64 * xi).sin();
                }
            }
            next.push(s);
        }
        h = next;
    }
    h[0]
}

pub fn oracle(net: &Network, x: &[f64]) -> f64 {
    match &net.layers {
        Layers::Mlp(_) => mlp_oracle(net, x),
        Layers::Kan(_) => kan_oracle(net, x),
        Layers::Fkan(_) => fkan_oracle(net, x),
    }
}

/// `|a - b| / max(1, |b|)`: absolute near zero, relative for the large
/// values that extrapolating spline layers can produce.
pub fn scaled_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}
