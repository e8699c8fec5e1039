//! Explicit Runge–Kutta integrators on `f64` state vectors.
//!
//! Both solvers accept `t1 < t0` and integrate backwards with negative
//! steps.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

fn axpy_into(out: &mut [f64], y: &[f64], h: f64, terms: &[(f64, &[f64])]) {
    for i in 0..out.len() {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        out[i] = y[i] + h * acc;
    }
}

/// Classic fourth-order Runge–Kutta with `steps` equal steps.
pub fn rk4<F>(mut f: F, t0: f64, t1: f64, y0: &[f64], steps: usize) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(Error::Config("rk4 needs at least one step".into()));
    }
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.to_vec();
    let mut tmp = vec![0.0; y.len()];
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        let k1 = f(t, &y)?;
        axpy_into(&mut tmp, &y, h, &[(0.5, &k1)]);
        let k2 = f(t + 0.5 * h, &tmp)?;
        axpy_into(&mut tmp, &y, h, &[(0.5, &k2)]);
        let k3 = f(t + 0.5 * h, &tmp)?;
        axpy_into(&mut tmp, &y, h, &[(1.0, &k3)]);
        let k4 = f(t + h, &tmp)?;
        for i in 0..y.len() {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "rk4" });
        }
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Attempted steps (accepted plus rejected) before giving up.
    pub max_steps: usize,
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AdaptiveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand–Prince 5(4) with first-same-as-last reuse.
pub fn dopri5<F>(mut f: F, t0: f64, t1: f64, y0: &[f64], config: &AdaptiveConfig) -> Result<(Vec<f64>, AdaptiveStats)>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    config.validate()?;
    let mut stats = AdaptiveStats::default();
    let mut y = y0.to_vec();
    let span = t1 - t0;
    if span == 0.0 {
        return Ok((y, stats));
    }
    let dir = span.signum();
    let n = y.len();
    let mut t = t0;
    let mut h = dir * span.abs() * 0.01;
    let mut k: Vec<Vec<f64>> = vec![Vec::new(); 7];
    k[0] = f(t, &y)?;
    stats.evaluations += 1;
    let mut tmp = vec![0.0; n];
    let mut y5 = vec![0.0; n];

    while (t1 - t) * dir > 0.0 {
        if stats.accepted + stats.rejected >= config.max_steps {
            return Err(Error::MaxSteps { max_steps: config.max_steps });
        }
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (r, kr) in k.iter().enumerate().take(s) {
                    acc += A[s][r] * kr[i];
                }
                tmp[i] = y[i] + h * acc;
            }
            k[s] = f(t + C[s] * h, &tmp)?;
            stats.evaluations += 1;
        }
        let mut err_sq = 0.0;
        for i in 0..n {
            let mut hi = 0.0;
            let mut lo = 0.0;
            for s in 0..7 {
                hi += B5[s] * k[s][i];
                lo += B4[s] * k[s][i];
            }
            y5[i] = y[i] + h * hi;
            let scale = config.atol + config.rtol * y[i].abs().max(y5[i].abs());
            let e = h * (hi - lo) / scale;
            err_sq += e * e;
        }
        let err = libm::sqrt(err_sq / n.max(1) as f64);
        if !err.is_finite() {
            return Err(Error::NonFinite { op: "dopri5" });
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * libm::pow(err, -0.2)).clamp(0.2, 5.0) };
        if err <= 1.0 {
            stats.accepted += 1;
            t += h;
            core::mem::swap(&mut y, &mut y5);
            // FSAL: the last stage was evaluated at the accepted point.
            k.swap(0, 6);
        } else {
            stats.rejected += 1;
        }
        h *= factor;
    }
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(_t: f64, y: &[f64]) -> Result<Vec<f64>> {
        Ok(y.iter().map(|v| -v).collect())
    }

    #[test]
    fn rk4_exponential() {
        let y = rk4(decay, 0.0, 1.0, &[1.0], 100).unwrap();
        assert!((y[0] - libm::exp(-1.0)).abs() < 1e-9);
    }

    #[test]
    fn backwards_integration() {
        let y = rk4(decay, 1.0, 0.0, &[1.0], 100).unwrap();
        assert!((y[0] - libm::exp(1.0)).abs() < 1e-8);
        let cfg = AdaptiveConfig { rtol: 1e-8, atol: 1e-10, max_steps: 10_000 };
        let (y, _) = dopri5(decay, 1.0, 0.0, &[1.0], &cfg).unwrap();
        assert!((y[0] - libm::exp(1.0)).abs() < 1e-6);
    }

    #[test]
    fn dopri5_oscillator() {
        let f = |_t: f64, y: &[f64]| Ok(vec![y[1], -y[0]]);
        let cfg = AdaptiveConfig { rtol: 1e-9, atol: 1e-12, max_steps: 100_000 };
        let (y, stats) = dopri5(f, 0.0, 2.0, &[1.0, 0.0], &cfg).unwrap();
        assert!((y[0] - libm::cos(2.0)).abs() < 1e-7);
        assert!((y[1] + libm::sin(2.0)).abs() < 1e-7);
        assert!(stats.accepted > 0);
    }

    #[test]
    fn max_steps_enforced() {
        let cfg = AdaptiveConfig { rtol: 1e-12, atol: 1e-14, max_steps: 3 };
        let r = dopri5(decay, 0.0, 10.0, &[1.0], &cfg);
        assert!(matches!(r, Err(Error::MaxSteps { max_steps: 3 })));
    }

    #[test]
    fn zero_field_is_identity() {
        let f = |_t: f64, y: &[f64]| Ok(vec![0.0; y.len()]);
        let y0 = [0.3, -1.7];
        assert_eq!(rk4(f, 1.0, 0.0, &y0, 7).unwrap(), y0.to_vec());
        let cfg = AdaptiveConfig { rtol: 1e-4, atol: 1e-4, max_steps: 100 };
        assert_eq!(dopri5(f, 1.0, 0.0, &y0, &cfg).unwrap().0, y0.to_vec());
    }
}
