//! Small ODE integrators: an adaptive Dormand–Prince 5(4) pair for the
//! geodesic systems and a fixed-step classical RK4 for the linear and
//! matrix systems marched on uniform grids.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// State that can be combined linearly by the RK4 stepper.
pub trait OdeState: Clone {
    /// `self += h * other`
    fn add_scaled(&mut self, h: f64, other: &Self);
}

impl OdeState for Vec<f64> {
    fn add_scaled(&mut self, h: f64, other: &Self) {
        for (a, b) in self.iter_mut().zip(other) {
            *a += h * b;
        }
    }
}

impl OdeState for DMatrix<f64> {
    fn add_scaled(&mut self, h: f64, other: &Self) {
        self.zip_apply(other, |a, b| *a += h * b);
    }
}

impl<A: OdeState, B: OdeState> OdeState for (A, B) {
    fn add_scaled(&mut self, h: f64, other: &Self) {
        self.0.add_scaled(h, &other.0);
        self.1.add_scaled(h, &other.1);
    }
}

impl OdeState for Vec<DMatrix<f64>> {
    fn add_scaled(&mut self, h: f64, other: &Self) {
        for (a, b) in self.iter_mut().zip(other) {
            a.add_scaled(h, b);
        }
    }
}

/// One classical fourth-order Runge–Kutta step of size `h` from `(t, y)`.
pub fn rk4_step<S, F>(rhs: &mut F, t: f64, y: &S, h: f64) -> Result<S>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    let k1 = rhs(t, y)?;
    let mut y2 = y.clone();
    y2.add_scaled(0.5 * h, &k1);
    let k2 = rhs(t + 0.5 * h, &y2)?;
    let mut y3 = y.clone();
    y3.add_scaled(0.5 * h, &k2);
    let k3 = rhs(t + 0.5 * h, &y3)?;
    let mut y4 = y.clone();
    y4.add_scaled(h, &k3);
    let k4 = rhs(t + h, &y4)?;
    let mut out = y.clone();
    out.add_scaled(h / 6.0, &k1);
    out.add_scaled(h / 3.0, &k2);
    out.add_scaled(h / 3.0, &k3);
    out.add_scaled(h / 6.0, &k4);
    Ok(out)
}

/// Tolerances and limits for [`integrate_adaptive`].
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveOptions {
    pub atol: f64,
    pub rtol: f64,
    pub h_max: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        AdaptiveOptions {
            atol: 1e-10,
            rtol: 1e-10,
            h_max: 0.1,
            h_min: 1e-12,
            max_steps: 1_000_000,
        }
    }
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction) with an
/// adaptive Dormand–Prince 5(4) pair. `h` carries the step size between
/// calls so consecutive segments reuse the last accepted step.
pub fn integrate_adaptive<F>(
    rhs: &mut F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    h: &mut f64,
    opts: &AdaptiveOptions,
) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let dim = y0.len();
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(y0.to_vec());
    }
    let dir = span.signum();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; dim]; 7];
    let mut tmp = vec![0.0; dim];
    let mut step = h.abs().clamp(opts.h_min, opts.h_max);
    let mut steps = 0usize;
    rhs(t, &y, &mut k[0])?;
    while (t1 - t) * dir > 0.0 {
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::Step { r: t });
        }
        let remaining = (t1 - t).abs();
        let last = step >= remaining;
        let hs = if last { remaining } else { step } * dir;
        for s in 1..7 {
            for i in 0..dim {
                let mut acc = y[i];
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += hs * A[s][j] * kj[i];
                }
                tmp[i] = acc;
            }
            rhs(t + C[s] * hs, &tmp, &mut k[s])?;
        }
        // tmp now holds the fifth-order solution (FSAL stage 7 input)
        let mut err = 0.0f64;
        for i in 0..dim {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += E[j] * kj[i];
            }
            e *= hs;
            let sc = opts.atol + opts.rtol * y[i].abs().max(tmp[i].abs());
            err = err.max((e / sc).abs());
        }
        if !err.is_finite() {
            step *= 0.25;
            if step < opts.h_min {
                return Err(Error::Step { r: t });
            }
            continue;
        }
        if err <= 1.0 {
            t = if last { t1 } else { t + hs };
            y.copy_from_slice(&tmp);
            k.swap(0, 6);
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            if !last {
                step = (step * fac).min(opts.h_max);
            }
        } else {
            step *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            if step < opts.h_min {
                return Err(Error::Step { r: t });
            }
        }
    }
    *h = step;
    Ok(y)
}
