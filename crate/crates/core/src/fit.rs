//! Small least-squares toolkit: a bounded Levenberg-Marquardt solver, linear
//! least squares, and summary statistics for bootstrap samples.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("fit is degenerate: {0}")]
    Degenerate(String),
    #[error("detuning estimate {estimate_hz:.3} Hz is at or beyond the Nyquist limit {nyquist_hz:.3} Hz")]
    Aliased { estimate_hz: f64, nyquist_hz: f64 },
    #[error("invalid fit input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmResult {
    pub params: Vec<f64>,
    /// Sum of squared residuals at `params`.
    pub cost: f64,
    pub iterations: usize,
}

/// Minimizes the sum of squared residuals. `model` fills the residual vector
/// and the Jacobian (rows = observations) at the given parameters. Parameters
/// are projected onto `bounds` after every step.
pub fn levenberg_marquardt(
    init: &[f64],
    bounds: &[(f64, f64)],
    n_obs: usize,
    model: impl Fn(&[f64], &mut DVector<f64>, &mut DMatrix<f64>),
) -> LmResult {
    let n = init.len();
    assert_eq!(bounds.len(), n);
    let clamp = |p: &mut [f64]| {
        for (v, (lo, hi)) in p.iter_mut().zip(bounds) {
            *v = v.clamp(*lo, *hi);
        }
    };
    let mut params = init.to_vec();
    clamp(&mut params);
    let mut r = DVector::zeros(n_obs);
    let mut j = DMatrix::zeros(n_obs, n);
    model(&params, &mut r, &mut j);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut trial_r = DVector::zeros(n_obs);
    let mut trial_j = DMatrix::zeros(n_obs, n);

    while iterations < 500 {
        iterations += 1;
        let jt = j.transpose();
        let a = &jt * &j;
        let g = &jt * &r;
        let mut damped = a.clone();
        for i in 0..n {
            damped[(i, i)] += lambda * a[(i, i)].max(1e-12);
        }
        let Some(step) = damped.lu().solve(&(-&g)) else {
            lambda *= 10.0;
            if lambda > 1e20 {
                break;
            }
            continue;
        };
        let mut trial: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p + s).collect();
        clamp(&mut trial);
        model(&trial, &mut trial_r, &mut trial_j);
        let trial_cost = trial_r.norm_squared();
        if trial_cost.is_finite() && trial_cost <= cost {
            let moved = trial
                .iter()
                .zip(&params)
                .map(|(a, b)| (a - b).abs() / (b.abs() + 1e-12))
                .fold(0.0, f64::max);
            let improvement = cost - trial_cost;
            params = trial;
            std::mem::swap(&mut r, &mut trial_r);
            std::mem::swap(&mut j, &mut trial_j);
            cost = trial_cost;
            lambda = (lambda / 10.0).max(1e-15);
            if moved < 1e-14 || improvement <= 1e-30 * (1.0 + cost) {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e20 {
                break;
            }
        }
    }
    LmResult {
        params,
        cost,
        iterations,
    }
}

/// Least-squares coefficients for `y ≈ Σ c_k · columns[k]`, with the
/// residual sum of squares.
pub fn linear_lsq(columns: &[Vec<f64>], y: &[f64]) -> Option<(Vec<f64>, f64)> {
    let m = y.len();
    let n = columns.len();
    if n == 0 || m < n {
        return None;
    }
    let a = DMatrix::from_fn(m, n, |i, k| columns[k][i]);
    let b = DVector::from_column_slice(y);
    let svd = a.clone().svd(true, true);
    let c = svd.solve(&b, 1e-12).ok()?;
    let res = &a * &c - &b;
    Some((c.iter().copied().collect(), res.norm_squared()))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
