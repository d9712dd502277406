//! Adaptive Dormand-Prince 5(4) integrator with FSAL and PI step control.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

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
// difference between the 5th- and 4th-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `y' = f(t, y)` forward in time, one target time at a time.
pub struct Dopri<F>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    rhs: F,
    opts: OdeOptions,
    t: f64,
    y: Vec<f64>,
    k1: Vec<f64>,
    h: f64,
    err_prev: f64,
    pub stats: OdeStats,
}

impl<F> Dopri<F>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    pub fn new(mut rhs: F, t0: f64, y0: Vec<f64>, opts: OdeOptions) -> Self {
        let mut k1 = vec![0.0; y0.len()];
        rhs(t0, &y0, &mut k1);
        let mut solver = Dopri {
            rhs,
            opts,
            t: t0,
            y: y0,
            k1,
            h: 0.0,
            err_prev: 1e-4,
            stats: OdeStats {
                evaluations: 1,
                ..OdeStats::default()
            },
        };
        solver.h = solver.initial_step();
        solver
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    fn scale(&self, a: f64, b: f64) -> f64 {
        self.opts.abs_tol + self.opts.rel_tol * a.abs().max(b.abs())
    }

    fn initial_step(&mut self) -> f64 {
        let n = self.y.len().max(1) as f64;
        let mut d0 = 0.0;
        let mut d1 = 0.0;
        for (y, k) in self.y.iter().zip(&self.k1) {
            let sc = self.scale(*y, *y);
            d0 += (y / sc).powi(2);
            d1 += (k / sc).powi(2);
        }
        let (d0, d1) = ((d0 / n).sqrt(), (d1 / n).sqrt());
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let y1: Vec<f64> = self.y.iter().zip(&self.k1).map(|(y, k)| y + h0 * k).collect();
        let mut f1 = vec![0.0; y1.len()];
        (self.rhs)(self.t + h0, &y1, &mut f1);
        self.stats.evaluations += 1;
        let mut d2 = 0.0;
        for i in 0..y1.len() {
            let sc = self.scale(self.y[i], self.y[i]);
            d2 += ((f1[i] - self.k1[i]) / sc).powi(2);
        }
        let d2 = (d2 / n).sqrt() / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(self.opts.max_step)
    }

    /// Steps until `t_end` is reached exactly.
    pub fn advance_to(&mut self, t_end: f64) -> Result<()> {
        let n = self.y.len();
        let mut stage = vec![vec![0.0; n]; 6];
        let mut tmp = vec![0.0; n];
        let mut y_new = vec![0.0; n];
        let mut k7 = vec![0.0; n];
        while self.t < t_end {
            let mut h = self.h.min(self.opts.max_step);
            let last = self.t + h >= t_end;
            if last {
                h = t_end - self.t;
            }
            if h <= 0.0 || self.t + h == self.t {
                return Err(Error::StepUnderflow { t: self.t, h });
            }
            let (t, y, k1) = (self.t, &self.y, &self.k1);

            for i in 0..n {
                tmp[i] = y[i] + h * A21 * k1[i];
            }
            (self.rhs)(t + C2 * h, &tmp, &mut stage[1]);
            for i in 0..n {
                tmp[i] = y[i] + h * (A31 * k1[i] + A32 * stage[1][i]);
            }
            (self.rhs)(t + C3 * h, &tmp, &mut stage[2]);
            for i in 0..n {
                tmp[i] = y[i] + h * (A41 * k1[i] + A42 * stage[1][i] + A43 * stage[2][i]);
            }
            (self.rhs)(t + C4 * h, &tmp, &mut stage[3]);
            for i in 0..n {
                tmp[i] = y[i]
                    + h * (A51 * k1[i] + A52 * stage[1][i] + A53 * stage[2][i] + A54 * stage[3][i]);
            }
            (self.rhs)(t + C5 * h, &tmp, &mut stage[4]);
            for i in 0..n {
                tmp[i] = y[i]
                    + h * (A61 * k1[i]
                        + A62 * stage[1][i]
                        + A63 * stage[2][i]
                        + A64 * stage[3][i]
                        + A65 * stage[4][i]);
            }
            (self.rhs)(t + h, &tmp, &mut stage[5]);
            for i in 0..n {
                y_new[i] = y[i]
                    + h * (B1 * k1[i]
                        + B3 * stage[2][i]
                        + B4 * stage[3][i]
                        + B5 * stage[4][i]
                        + B6 * stage[5][i]);
            }
            (self.rhs)(t + h, &y_new, &mut k7);
            self.stats.evaluations += 6;

            let mut err = 0.0;
            for i in 0..n {
                let e = h
                    * (E1 * k1[i]
                        + E3 * stage[2][i]
                        + E4 * stage[3][i]
                        + E5 * stage[4][i]
                        + E6 * stage[5][i]
                        + E7 * k7[i]);
                err += (e / self.scale(y[i], y_new[i])).powi(2);
            }
            let err = (err / n.max(1) as f64).sqrt();

            if err <= 1.0 {
                self.stats.accepted += 1;
                self.t = if last { t_end } else { t + h };
                std::mem::swap(&mut self.y, &mut y_new);
                std::mem::swap(&mut self.k1, &mut k7);
                // PI controller
                let err = err.max(1e-10);
                let fac = 0.9 * err.powf(-0.7 / 5.0) * self.err_prev.powf(0.4 / 5.0);
                self.err_prev = err;
                let grown = h * fac.clamp(0.2, 5.0);
                // keep the unclipped step when the last step was shortened
                self.h = if last { grown.max(self.h) } else { grown };
            } else {
                self.stats.rejected += 1;
                let fac = if err.is_finite() {
                    (0.9 * err.powf(-0.2)).clamp(0.1, 0.9)
                } else {
                    0.1
                };
                self.h = h * fac;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let mut s = Dopri::new(|_, y, dy| dy[0] = -y[0], 0.0, vec![1.0], OdeOptions::default());
        for &t in &[0.5, 1.0, 3.0] {
            s.advance_to(t).unwrap();
            assert!((s.y()[0] - (-t).exp()).abs() < 1e-9);
        }
        assert_eq!(s.t(), 3.0);
    }

    #[test]
    fn riccati_matches_closed_form() {
        let opts = OdeOptions {
            rel_tol: 1e-12,
            abs_tol: 1e-14,
            ..OdeOptions::default()
        };
        let mut s = Dopri::new(|_, y, dy| dy[0] = -y[0] - y[0] * y[0], 0.0, vec![1.0], opts);
        s.advance_to(2f64.ln()).unwrap();
        assert!((s.y()[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn harmonic_oscillator_preserves_phase() {
        let mut s = Dopri::new(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            0.0,
            vec![1.0, 0.0],
            OdeOptions {
                rel_tol: 1e-10,
                abs_tol: 1e-12,
                ..OdeOptions::default()
            },
        );
        s.advance_to(std::f64::consts::TAU).unwrap();
        assert!((s.y()[0] - 1.0).abs() < 1e-8 && s.y()[1].abs() < 1e-8);
        assert!(s.stats.accepted > 10);
    }

    #[test]
    fn blowup_reports_underflow() {
        let mut s = Dopri::new(|_, y, dy| dy[0] = y[0] * y[0], 0.0, vec![1.0], OdeOptions::default());
        match s.advance_to(2.0) {
            Err(Error::StepUnderflow { t, .. }) => assert!((t - 1.0).abs() < 1e-3),
            other => panic!("expected underflow, got {other:?}"),
        }
    }
}
