//! Adaptive Dormand-Prince 5(4) integrator for complex-valued ODE systems
//! with dense (continuous) output, used by the master-equation engine.

use crate::error::{Error, Result};
use num_complex::Complex64 as C64;

#[derive(Debug, Clone)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: Option<f64>,
    pub h_max: Option<f64>,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { rtol: 1e-8, atol: 1e-10, h_init: None, h_max: None, max_steps: 50_000_000 }
    }
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// b - bhat, the embedded error weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Dense-output quartic coefficients.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

struct Work {
    k: [Vec<C64>; 7],
    ytmp: Vec<C64>,
    y1: Vec<C64>,
}

impl Work {
    fn new(n: usize) -> Self {
        Work {
            k: std::array::from_fn(|_| vec![C64::new(0.0, 0.0); n]),
            ytmp: vec![C64::new(0.0, 0.0); n],
            y1: vec![C64::new(0.0, 0.0); n],
        }
    }
}

/// Integrates dy/dt = f(t, y) from t0 to t1 and returns the dense-output
/// states at the (ascending, in-range) sample times `tgrid`.
pub fn integrate_sampled<F>(
    mut f: F,
    t0: f64,
    t1: f64,
    y0: &[C64],
    tgrid: &[f64],
    opts: &OdeOptions,
) -> Result<Vec<Vec<C64>>>
where
    F: FnMut(f64, &[C64], &mut [C64]),
{
    if !(t1 > t0) {
        return Err(Error::InvalidParam(format!("need t1 > t0, got [{t0}, {t1}]")));
    }
    for w in tgrid.windows(2) {
        if w[1] < w[0] {
            return Err(Error::InvalidParam("sample times must be ascending".into()));
        }
    }
    if let (Some(&lo), Some(&hi)) = (tgrid.first(), tgrid.last()) {
        let span = t1 - t0;
        if lo < t0 - 1e-12 * span || hi > t1 + 1e-12 * span {
            return Err(Error::InvalidParam("sample times outside the integration window".into()));
        }
    }

    let n = y0.len();
    let mut wk = Work::new(n);
    let mut y = y0.to_vec();
    let mut t = t0;
    let h_max = opts.h_max.unwrap_or(t1 - t0);
    let mut h = opts.h_init.unwrap_or((t1 - t0) * 1e-6).min(h_max);
    let mut out: Vec<Vec<C64>> = Vec::with_capacity(tgrid.len());
    let mut gi = 0;
    while gi < tgrid.len() && tgrid[gi] <= t0 {
        out.push(y.clone());
        gi += 1;
    }

    f(t, &y, &mut wk.k[0]);
    let mut steps = 0usize;
    while t < t1 {
        if steps >= opts.max_steps {
            return Err(Error::NoConvergence(format!(
                "integrator exceeded {} steps at t = {t:.6e} s",
                opts.max_steps
            )));
        }
        steps += 1;
        if h > t1 - t {
            h = t1 - t;
        }
        if t + h <= t {
            return Err(Error::StepSizeUnderflow { t_s: t, err: f64::NAN });
        }

        // Stage 2
        for i in 0..n {
            wk.ytmp[i] = y[i] + wk.k[0][i] * (A21 * h);
        }
        f(t + C2 * h, &wk.ytmp, &mut wk.k[1]);
        // Stage 3
        for i in 0..n {
            wk.ytmp[i] = y[i] + (wk.k[0][i] * A31 + wk.k[1][i] * A32) * h;
        }
        f(t + C3 * h, &wk.ytmp, &mut wk.k[2]);
        // Stage 4
        for i in 0..n {
            wk.ytmp[i] = y[i] + (wk.k[0][i] * A41 + wk.k[1][i] * A42 + wk.k[2][i] * A43) * h;
        }
        f(t + C4 * h, &wk.ytmp, &mut wk.k[3]);
        // Stage 5
        for i in 0..n {
            wk.ytmp[i] = y[i]
                + (wk.k[0][i] * A51 + wk.k[1][i] * A52 + wk.k[2][i] * A53 + wk.k[3][i] * A54) * h;
        }
        f(t + C5 * h, &wk.ytmp, &mut wk.k[4]);
        // Stage 6
        for i in 0..n {
            wk.ytmp[i] = y[i]
                + (wk.k[0][i] * A61
                    + wk.k[1][i] * A62
                    + wk.k[2][i] * A63
                    + wk.k[3][i] * A64
                    + wk.k[4][i] * A65)
                    * h;
        }
        f(t + h, &wk.ytmp, &mut wk.k[5]);
        // 5th-order solution
        for i in 0..n {
            wk.y1[i] = y[i]
                + (wk.k[0][i] * B1
                    + wk.k[2][i] * B3
                    + wk.k[3][i] * B4
                    + wk.k[4][i] * B5
                    + wk.k[5][i] * B6)
                    * h;
        }
        f(t + h, &wk.y1, &mut wk.k[6]);

        // Embedded error estimate.
        let mut err_acc = 0.0;
        for i in 0..n {
            let e = (wk.k[0][i] * E1
                + wk.k[2][i] * E3
                + wk.k[3][i] * E4
                + wk.k[4][i] * E5
                + wk.k[5][i] * E6
                + wk.k[6][i] * E7)
                * h;
            let sc = opts.atol + opts.rtol * y[i].norm().max(wk.y1[i].norm());
            let q = e.norm() / sc;
            err_acc += q * q;
        }
        let err = (err_acc / n as f64).sqrt();

        if !err.is_finite() {
            // k[0] still holds f(t, y); just retry with a smaller step.
            h *= 0.1;
            if h <= 16.0 * f64::EPSILON * t.abs().max(1e-30) {
                return Err(Error::StepSizeUnderflow { t_s: t, err });
            }
            continue;
        }

        if err <= 1.0 {
            // Accept. Emit dense output for sample points inside (t, t+h].
            if gi < tgrid.len() && tgrid[gi] <= t + h {
                let mut cont1 = vec![C64::new(0.0, 0.0); n];
                let mut cont2 = vec![C64::new(0.0, 0.0); n];
                let mut cont3 = vec![C64::new(0.0, 0.0); n];
                let mut cont4 = vec![C64::new(0.0, 0.0); n];
                for i in 0..n {
                    let ydiff = wk.y1[i] - y[i];
                    let bspl = wk.k[0][i] * h - ydiff;
                    cont1[i] = ydiff;
                    cont2[i] = bspl;
                    cont3[i] = ydiff - wk.k[6][i] * h - bspl;
                    cont4[i] = (wk.k[0][i] * D1
                        + wk.k[2][i] * D3
                        + wk.k[3][i] * D4
                        + wk.k[4][i] * D5
                        + wk.k[5][i] * D6
                        + wk.k[6][i] * D7)
                        * h;
                }
                while gi < tgrid.len() && tgrid[gi] <= t + h + 1e-12 * h {
                    let theta = ((tgrid[gi] - t) / h).clamp(0.0, 1.0);
                    let omt = 1.0 - theta;
                    let mut s = vec![C64::new(0.0, 0.0); n];
                    for i in 0..n {
                        s[i] = y[i]
                            + (cont1[i]
                                + (cont2[i] + (cont3[i] + cont4[i] * omt) * theta) * omt)
                                * theta;
                    }
                    out.push(s);
                    gi += 1;
                }
            }
            t += h;
            std::mem::swap(&mut y, &mut wk.y1);
            // FSAL: derivative at the new point is stage 7.
            wk.k.swap(0, 6);
            let fac = (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
            h = (h * fac).min(h_max);
        } else {
            let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            h *= fac;
            if h <= 16.0 * f64::EPSILON * t.abs().max(1e-30) {
                return Err(Error::StepSizeUnderflow { t_s: t, err });
            }
        }
    }
    // Any trailing samples at exactly t1 (within roundoff).
    while gi < tgrid.len() {
        out.push(y.clone());
        gi += 1;
    }
    Ok(out)
}

/// Integrates to t1 and returns only the final state.
pub fn integrate_to<F>(f: F, t0: f64, t1: f64, y0: &[C64], opts: &OdeOptions) -> Result<Vec<C64>>
where
    F: FnMut(f64, &[C64], &mut [C64]),
{
    let states = integrate_sampled(f, t0, t1, y0, &[t1], opts)?;
    Ok(states.into_iter().next_back().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn exponential_decay_matches_analytic() {
        let lam = c(-2.0, 0.0);
        let tgrid: Vec<f64> = (0..=10).map(|i| i as f64 * 0.3).collect();
        let states = integrate_sampled(
            |_t, y, dy| dy[0] = lam * y[0],
            0.0,
            3.0,
            &[c(1.0, 0.0)],
            &tgrid,
            &OdeOptions::default(),
        )
        .unwrap();
        for (i, s) in states.iter().enumerate() {
            let want = (lam * tgrid[i]).exp();
            assert!((s[0] - want).norm() < 1e-9, "t={} got {} want {}", tgrid[i], s[0], want);
        }
    }

    #[test]
    fn oscillator_preserves_modulus_and_phase() {
        // Global error over 100 radians accumulates well above the local
        // tolerance; bounds reflect that.
        let om = 50.0;
        let y = integrate_to(
            |_t, y, dy| dy[0] = c(0.0, om) * y[0],
            0.0,
            2.0,
            &[c(1.0, 0.0)],
            &OdeOptions { rtol: 1e-10, atol: 1e-12, ..Default::default() },
        )
        .unwrap();
        let want = c(0.0, om * 2.0).exp();
        assert!((y[0] - want).norm() < 3e-7);
        assert!((y[0].norm() - 1.0).abs() < 3e-7);
    }

    #[test]
    fn dense_output_is_accurate_off_step() {
        // Irrational sample spacing guarantees interior-of-step evaluation.
        let lam = c(-1.0, 7.0);
        let tgrid: Vec<f64> = (0..57).map(|i| i as f64 * 0.0314159).collect();
        let states = integrate_sampled(
            |_t, y, dy| dy[0] = lam * y[0],
            0.0,
            2.0,
            &[c(1.0, 0.0)],
            &tgrid,
            &OdeOptions::default(),
        )
        .unwrap();
        for (i, s) in states.iter().enumerate() {
            let want = (lam * tgrid[i]).exp();
            assert!((s[0] - want).norm() < 1e-7, "t={}", tgrid[i]);
        }
    }

    #[test]
    fn tighter_tolerance_reduces_error() {
        let lam = c(0.0, 30.0);
        let run = |rtol: f64| {
            let y = integrate_to(
                |_t, y, dy| dy[0] = lam * y[0],
                0.0,
                5.0,
                &[c(1.0, 0.0)],
                &OdeOptions { rtol, atol: rtol * 1e-2, ..Default::default() },
            )
            .unwrap();
            ((lam * 5.0).exp() - y[0]).norm()
        };
        let loose = run(1e-6);
        let tight = run(1e-9);
        assert!(tight < loose / 10.0, "loose {loose} tight {tight}");
    }

    #[test]
    fn two_mode_system_matches_matrix_exponential() {
        // The two-level emission generator, as an independent cross-check.
        let j = 0.3;
        let gamma = 1.0;
        let gen = [
            [c(0.0, 0.0), c(0.0, -j)],
            [c(0.0, -j), c(-gamma / 2.0, 0.0)],
        ];
        let t_end = 8.0;
        let y = integrate_to(
            |_t, y, dy| {
                dy[0] = gen[0][0] * y[0] + gen[0][1] * y[1];
                dy[1] = gen[1][0] * y[0] + gen[1][1] * y[1];
            },
            0.0,
            t_end,
            &[c(1.0, 0.0), c(0.0, 0.0)],
            &OdeOptions { rtol: 1e-11, atol: 1e-13, ..Default::default() },
        )
        .unwrap();
        let scaled = [
            [gen[0][0] * t_end, gen[0][1] * t_end],
            [gen[1][0] * t_end, gen[1][1] * t_end],
        ];
        let u = crate::cxmat::expm2(scaled);
        let want = crate::cxmat::mat2_mul_vec(&u, [c(1.0, 0.0), c(0.0, 0.0)]);
        assert!((y[0] - want[0]).norm() < 1e-8);
        assert!((y[1] - want[1]).norm() < 1e-8);
    }

    #[test]
    fn step_budget_is_enforced() {
        let res = integrate_to(
            |_t, y, dy| dy[0] = c(0.0, 1e6) * y[0],
            0.0,
            10.0,
            &[c(1.0, 0.0)],
            &OdeOptions { max_steps: 50, ..Default::default() },
        );
        assert!(matches!(res, Err(Error::NoConvergence(_))));
    }

    #[test]
    fn rejects_bad_sample_grids() {
        let f = |_t: f64, y: &[C64], dy: &mut [C64]| dy[0] = y[0];
        let y0 = [c(1.0, 0.0)];
        assert!(integrate_sampled(f, 0.0, 1.0, &y0, &[0.5, 0.2], &OdeOptions::default()).is_err());
        let f2 = |_t: f64, y: &[C64], dy: &mut [C64]| dy[0] = y[0];
        assert!(integrate_sampled(f2, 0.0, 1.0, &y0, &[1.5], &OdeOptions::default()).is_err());
    }
}
