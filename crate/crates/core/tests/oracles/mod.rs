//! Independent brute-force reference implementations shared by the
//! integration and acceptance tests. Nothing here calls the code under test
//! except for plain data types.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use chanstroke::chan::{MergedBar, Shape, ShapeKind, Stroke, StrokeDirection, MIN_STROKE_BARS};
use chanstroke::env::Side;
use chanstroke::nn::{Activation, Mlp};

/// True if either range strictly contains the other.
pub fn contains(a: (f64, f64), b: (f64, f64)) -> bool {
    let (al, ah) = a;
    let (bl, bh) = b;
    (al < bl && ah > bh) || (bl < al && bh > ah)
}

/// Number of adjacent pairs of `merged` in an inclusion relationship.
pub fn inclusion_pairs(merged: &[MergedBar]) -> usize {
    let mut count = 0;
    for i in 1..merged.len() {
        if contains((merged[i - 1].low, merged[i - 1].high), (merged[i].low, merged[i].high)) {
            count += 1;
        }
    }
    count
}

/// Every strict three-bar top or bottom, as `(is_top, center)`.
pub fn brute_shapes(merged: &[MergedBar]) -> Vec<(bool, usize)> {
    let mut out = Vec::new();
    if merged.len() < 3 {
        return out;
    }
    for i in 1..merged.len() - 1 {
        let (l, m, r) = (&merged[i - 1], &merged[i], &merged[i + 1]);
        let top = m.high > l.high && m.high > r.high && m.low > l.low && m.low > r.low;
        let bottom = m.high < l.high && m.high < r.high && m.low < l.low && m.low < r.low;
        if top {
            out.push((true, i));
        } else if bottom {
            out.push((false, i));
        }
    }
    out
}

/// Counts broken stroke rules: kind alternation, contiguity, the minimum
/// bar span, direction labels and end-pivot ordering.
pub fn stroke_violations(strokes: &[Stroke]) -> usize {
    let mut bad = 0;
    for s in strokes {
        if s.start.kind == s.end.kind {
            bad += 1;
        }
        if s.end.center < s.start.center || s.end.center - s.start.center + 1 < MIN_STROKE_BARS {
            bad += 1;
        }
        match s.direction {
            StrokeDirection::Rising => {
                if s.start.kind != ShapeKind::Bottom || !(s.end.pivot_price > s.start.pivot_price) {
                    bad += 1;
                }
            }
            StrokeDirection::Descending => {
                if s.start.kind != ShapeKind::Top || !(s.end.pivot_price < s.start.pivot_price) {
                    bad += 1;
                }
            }
        }
    }
    for w in strokes.windows(2) {
        if w[0].end != w[1].start || w[0].direction == w[1].direction {
            bad += 1;
        }
    }
    bad
}

/// Shape endpoints must be real shapes of the merged sequence.
pub fn endpoints_are_shapes(strokes: &[Stroke], shapes: &[Shape]) -> bool {
    strokes
        .iter()
        .flat_map(|s| [s.start, s.end])
        .all(|p| shapes.contains(&p))
}

/// Turtle rule by explicit trailing max/min loops over closes `0..=t`.
pub fn brute_turtle(closes: &[f64], t: usize) -> (Side, f64) {
    let today = closes[t];
    if t >= 20 {
        let mut hi = f64::NEG_INFINITY;
        for c in &closes[t - 20..t] {
            if *c > hi {
                hi = *c;
            }
        }
        if today > hi {
            return (Side::Buy, 1.0);
        }
    }
    if t >= 10 {
        let mut lo = f64::INFINITY;
        for c in &closes[t - 10..t] {
            if *c < lo {
                lo = *c;
            }
        }
        if today < lo {
            return (Side::Sell, 1.0);
        }
    }
    (Side::Hold, 0.0)
}

/// Maximum drawdown over all ordered (peak, trough) pairs.
pub fn brute_drawdown(values: &[f64]) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..values.len() {
        for j in i..values.len() {
            worst = worst.max((values[i] - values[j]) / values[i]);
        }
    }
    worst
}

/// Optimal action values of a deterministic finite MDP by value iteration.
/// `next[s][a]` and `reward[s][a]` describe the transitions.
pub fn value_iteration(next: &[Vec<usize>], reward: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    let n = next.len();
    let mut v = vec![0.0; n];
    for _ in 0..10_000 {
        let q: Vec<Vec<f64>> = (0..n)
            .map(|s| {
                (0..next[s].len())
                    .map(|a| reward[s][a] + gamma * v[next[s][a]])
                    .collect()
            })
            .collect();
        let nv: Vec<f64> = q.iter().map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
        let delta = nv.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = nv;
        if delta < 1e-14 {
            return q;
        }
    }
    panic!("value iteration did not converge");
}

/// Plain nested-loop forward pass over the network's parameters.
pub fn naive_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in net.layers() {
        let (rows, cols) = layer.weights.dim();
        let mut out = vec![0.0; rows];
        for (r, o) in out.iter_mut().enumerate() {
            let mut z = layer.bias[r];
            for c in 0..cols {
                z += layer.weights[[r, c]] * h[c];
            }
            *o = match layer.activation {
                Activation::Relu => z.max(0.0),
                Activation::Tanh => z.tanh(),
                Activation::Identity => z,
            };
        }
        h = out;
    }
    h
}

/// Central difference of `f` with respect to flat parameter `k`.
pub fn central_difference(net: &Mlp, k: usize, h: f64, f: impl Fn(&Mlp) -> f64) -> f64 {
    let mut plus = net.clone();
    *plus.param_mut(k) += h;
    let mut minus = net.clone();
    *minus.param_mut(k) -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error with a small absolute floor for near-zero gradients.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}
