//! Uniform grids, trapezoid quadrature and second-order finite differences.

use std::ops::{Add, Mul, Sub};

/// Uniformly spaced points covering `[0, length]` with `cells` intervals.
pub fn uniform_grid(length: f64, cells: usize) -> Vec<f64> {
    let n = cells.max(1);
    (0..=n).map(|j| length * j as f64 / n as f64).collect()
}

/// Trapezoid rule over an ascending grid.
pub fn trapezoid(xs: &[f64], values: &[f64]) -> f64 {
    assert_eq!(xs.len(), values.len());
    let mut acc = 0.0;
    for k in 1..xs.len() {
        acc += 0.5 * (xs[k] - xs[k - 1]) * (values[k] + values[k - 1]);
    }
    acc
}

/// Second-order finite-difference derivative on an ascending grid with at
/// least three points: three-point central stencils inside, one-sided at the
/// ends. Exact for quadratics on arbitrary spacing.
pub fn fd_derivative<T>(xs: &[f64], vals: &[T]) -> Vec<T>
where
    T: Clone + Add<Output = T> + Sub<Output = T> + Mul<f64, Output = T>,
{
    let n = xs.len();
    assert!(n >= 3, "finite differences need at least three points");
    assert_eq!(n, vals.len());
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (i0, i1, i2) = if k == 0 {
            (0, 1, 2)
        } else if k == n - 1 {
            (n - 3, n - 2, n - 1)
        } else {
            (k - 1, k, k + 1)
        };
        let h1 = xs[i1] - xs[i0];
        let h2 = xs[i2] - xs[i1];
        let (c0, c1, c2) = if k == i0 {
            (
                -(2.0 * h1 + h2) / (h1 * (h1 + h2)),
                (h1 + h2) / (h1 * h2),
                -h1 / (h2 * (h1 + h2)),
            )
        } else if k == i2 {
            (
                h2 / (h1 * (h1 + h2)),
                -(h1 + h2) / (h1 * h2),
                (2.0 * h2 + h1) / (h2 * (h1 + h2)),
            )
        } else {
            (
                -h2 / (h1 * (h1 + h2)),
                (h2 - h1) / (h1 * h2),
                h1 / (h2 * (h1 + h2)),
            )
        };
        out.push(vals[i0].clone() * c0 + vals[i1].clone() * c1 + vals[i2].clone() * c2);
    }
    out
}

/// Index bracketing for linear interpolation: returns `(k, t)` with
/// `xs[k] <= x <= xs[k+1]` and `t` the local coordinate in `[0, 1]`.
pub fn bracket(xs: &[f64], x: f64) -> (usize, f64) {
    let n = xs.len();
    if x <= xs[0] {
        return (0, 0.0);
    }
    if x >= xs[n - 1] {
        return (n - 2, 1.0);
    }
    let mut k = match xs.binary_search_by(|p| p.total_cmp(&x)) {
        Ok(k) => k,
        Err(k) => k - 1,
    };
    if k >= n - 1 {
        k = n - 2;
    }
    let width = xs[k + 1] - xs[k];
    (k, ((x - xs[k]) / width).clamp(0.0, 1.0))
}
