//! Finite-difference oracles for derivative verification.
//!
//! These utilities are the independent reference path used by the test
//! suites: central differences of a scalar function for gradients, and
//! second-order central differences for Hessians. They deliberately never
//! call into the analytic evaluation code they are used to check.

/// Central-difference gradient of a scalar function at `point`.
pub fn fd_gradient<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        out.push((fp - fm) / (2.0 * step));
    }
    out
}

/// Central difference of a scalar function along one coordinate.
pub fn fd_partial<F>(f: F, point: &[f64], coord: usize, step: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    x[coord] = point[coord] + step;
    let fp = f(&x);
    x[coord] = point[coord] - step;
    let fm = f(&x);
    (fp - fm) / (2.0 * step)
}

/// Dense Hessian of a scalar function by second-order central differences.
///
/// Entry (i, j) is estimated from four loss evaluations; the result is
/// symmetrized. Independent of any gradient code.
pub fn fd_hessian<F>(f: F, point: &[f64], step: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let n = point.len();
    let mut x = point.to_vec();
    let f0 = f(point);
    let mut h = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let (oi, oj) = (point[i], point[j]);
            let mut eval = |si: f64, sj: f64| {
                if i == j {
                    x[i] = oi + (si + sj) * step;
                } else {
                    x[i] = oi + si * step;
                    x[j] = oj + sj * step;
                }
                let v = f(&x);
                x[i] = oi;
                x[j] = oj;
                v
            };
            let val = if i == j {
                // (f(x+2h) - 2f(x) + f(x-2h)) / 4h^2
                let fpp = eval(1.0, 1.0);
                let fmm = eval(-1.0, -1.0);
                (fpp - 2.0 * f0 + fmm) / (4.0 * step * step)
            } else {
                let fpp = eval(1.0, 1.0);
                let fpm = eval(1.0, -1.0);
                let fmp = eval(-1.0, 1.0);
                let fmm = eval(-1.0, -1.0);
                (fpp - fpm - fmp + fmm) / (4.0 * step * step)
            };
            h[i][j] = val;
            h[j][i] = val;
        }
    }
    h
}

/// Max-norm relative error between two vectors: `max|a-b| / max(max|a|, floor)`.
pub fn rel_err_vec(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut num: f64 = 0.0;
    let mut den: f64 = floor;
    for (x, y) in a.iter().zip(b) {
        num = num.max((x - y).abs());
        den = den.max(x.abs()).max(y.abs());
    }
    num / den
}

/// Relative error between two scalars with an absolute floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
