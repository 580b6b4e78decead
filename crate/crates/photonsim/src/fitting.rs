//! Small fitting toolbox: golden-section scalar minimization, a compact
//! Levenberg-Marquardt least-squares driver with numerical Jacobians, and a
//! log-linear exponential-decay fit.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Golden-section search for the minimum of a unimodal scalar function on
/// [a, b]. Returns (argmin, min). `xtol` is an absolute tolerance on the
/// bracket width.
pub fn golden_section_min<F: Fn(f64) -> f64>(
    f: &F,
    mut a: f64,
    mut b: f64,
    xtol: f64,
    max_iter: usize,
) -> (f64, f64) {
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..max_iter {
        if (b - a).abs() <= xtol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop when the largest parameter step falls below xtol * (1 + |x|).
    pub xtol: f64,
    /// Stop when the relative cost decrease falls below ftol.
    pub ftol: f64,
    pub lambda0: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions { max_iter: 200, xtol: 1e-12, ftol: 1e-14, lambda0: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub x: Vec<f64>,
    /// Sum of squared residuals at the solution.
    pub cost: f64,
    pub rms: f64,
    /// Parameter covariance estimate, scaled by the residual variance.
    pub covariance: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn jacobian<F: Fn(&[f64]) -> Vec<f64>>(f: &F, x: &[f64], m: usize) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    for j in 0..n {
        let h = 1e-7 * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let rp = f(&xp);
        xp[j] = x[j] - h;
        let rm = f(&xp);
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Levenberg-Marquardt minimization of sum r_i(x)^2. `residuals` maps the
/// parameter vector to the residual vector (fixed length).
pub fn levenberg_marquardt<F: Fn(&[f64]) -> Vec<f64>>(
    residuals: F,
    x0: &[f64],
    opts: &LmOptions,
) -> Result<LmResult> {
    let n = x0.len();
    if n == 0 {
        return Err(Error::FitFailure("no parameters to fit".into()));
    }
    let mut x = x0.to_vec();
    let mut r = residuals(&x);
    let m = r.len();
    if m < n {
        return Err(Error::FitFailure(format!(
            "{m} residuals cannot determine {n} parameters"
        )));
    }
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    if !cost.is_finite() {
        return Err(Error::FitFailure("cost not finite at the initial point".into()));
    }
    let mut lambda = opts.lambda0;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let jac = jacobian(&residuals, &x, m);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * DVector::from_column_slice(&r);
        let mut improved = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for d in 0..n {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&jtr)) else {
                lambda *= 8.0;
                continue;
            };
            let xt: Vec<f64> = (0..n).map(|j| x[j] + step[j]).collect();
            let rt = residuals(&xt);
            let ct: f64 = rt.iter().map(|v| v * v).sum();
            if ct.is_finite() && ct < cost {
                let small_step = (0..n).all(|j| step[j].abs() <= opts.xtol * (1.0 + x[j].abs()));
                let small_drop = (cost - ct) <= opts.ftol * cost.max(1e-300);
                x = xt;
                r = rt;
                cost = ct;
                lambda = (lambda / 8.0).max(1e-12);
                improved = true;
                if small_step || small_drop {
                    converged = true;
                }
                break;
            }
            lambda *= 8.0;
            if lambda > 1e12 {
                break;
            }
        }
        if !improved {
            // No downhill step found at any damping: we are at a (possibly
            // noisy) minimum.
            converged = true;
        }
        if converged {
            break;
        }
    }
    let jac = jacobian(&residuals, &x, m);
    let jtj = jac.transpose() * &jac;
    let dof = (m.saturating_sub(n)).max(1) as f64;
    let sigma2 = cost / dof;
    let covariance = jtj
        .clone()
        .try_inverse()
        .map(|inv| inv * sigma2)
        .unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN));
    Ok(LmResult {
        rms: (cost / m as f64).sqrt(),
        x,
        cost,
        covariance,
        iterations,
        converged,
    })
}

/// Fits y = A exp(-rate t) by linear least squares on ln y.
/// All y must be strictly positive. Returns (rate, A).
pub fn fit_exponential_decay(t: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if t.len() != y.len() || t.len() < 2 {
        return Err(Error::DegenerateInput("exponential fit needs >= 2 samples".into()));
    }
    if y.iter().any(|&v| v <= 0.0) {
        return Err(Error::DegenerateInput("exponential fit needs positive samples".into()));
    }
    let n = t.len() as f64;
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let st: f64 = t.iter().sum();
    let sy: f64 = ly.iter().sum();
    let stt: f64 = t.iter().map(|v| v * v).sum();
    let sty: f64 = t.iter().zip(&ly).map(|(a, b)| a * b).sum();
    let denom = n * stt - st * st;
    if denom.abs() < 1e-300 {
        return Err(Error::DegenerateInput("time samples are all equal".into()));
    }
    let slope = (n * sty - st * sy) / denom;
    let intercept = (sy - slope * st) / n;
    Ok((-slope, intercept.exp()))
}
