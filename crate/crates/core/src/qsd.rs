//! Conditioned log-Laplace functionals, the Yaglom transform and the
//! quasi-stationary family.
//!
//! For the process started from `nu`,
//!
//! ```text
//! 1 - e^{-Gamma_t f} = (1 - e^{-nu(V_t f)}) / (1 - e^{-nu(v_t)})
//! ```
//!
//! and the Yaglom transform is its limit `Y(f) = 1 - e^{-G f}`. Every
//! quasi-stationary law with mass decay rate `r` in `[lambda, 0)` has
//! transform `Y(f)^{r / lambda}`.

use serde::Serialize;

use crate::cumulant::{extinction_at, solve_cumulant_at, solve_truncated, SolverOptions};
use crate::error::{Error, Result};
use crate::model::{FnVec, SuperprocessModel};
use crate::spectral::{require_subcritical, SpectralTriple};

/// `1 - e^{-x}` without cancellation.
fn one_minus_exp_neg(x: f64) -> f64 {
    -(-x).exp_m1()
}

/// `1 - e^{-Gamma_t f}` at a single time.
pub fn gamma_t(
    m: &SuperprocessModel,
    triple: &SpectralTriple,
    f: &FnVec,
    t: f64,
    opts: &SolverOptions,
) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("time t = {t} must be positive")));
    }
    if f.is_zero() {
        return Ok(0.0);
    }
    let den = one_minus_exp_neg(triple.nu_of(extinction_at(m, triple, &[t], opts)?.last()));
    if f.values().iter().all(|v| v.is_infinite()) {
        return Ok(1.0);
    }
    let num = one_minus_exp_neg(triple.nu_of(solve_truncated(m, triple, f, &[t], opts)?.last()));
    Ok((num / den).min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct YaglomOptions {
    pub solver: SolverOptions,
    /// Stop once consecutive checkpoint values differ by less than this.
    pub plateau_tol: f64,
    /// Ratio between consecutive checkpoint times.
    pub growth: f64,
    /// Last checkpoint, in units of the relaxation time `1 / rate`.
    pub horizon: f64,
    /// Apply the one-term geometric correction to the plateau value.
    pub extrapolate: bool,
}

impl Default for YaglomOptions {
    fn default() -> Self {
        YaglomOptions {
            solver: SolverOptions {
                rel_tol: 1e-10,
                abs_tol: 1e-13,
                ..SolverOptions::default()
            },
            plateau_tol: 1e-6,
            growth: std::f64::consts::SQRT_2,
            horizon: 80.0,
            extrapolate: true,
        }
    }
}

/// Audit record for one evaluation of the Yaglom transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct YaglomEvaluation {
    /// Reported value (extrapolated when enabled).
    pub value: f64,
    /// Last raw `1 - e^{-Gamma_t f}` before extrapolation.
    pub raw: f64,
    pub previous: f64,
    pub stop_t: f64,
    /// Exponential rate assumed by the correction term.
    pub rate: f64,
}

/// `f -> Y(f) = 1 - e^{-G f}`, evaluated on demand against precomputed
/// extinction checkpoints. Immutable after construction.
#[derive(Debug, Clone)]
pub struct YaglomTransform {
    model: SuperprocessModel,
    triple: SpectralTriple,
    opts: YaglomOptions,
    rate: f64,
    checkpoints: Vec<f64>,
    survival: Vec<f64>,
}

impl YaglomTransform {
    pub fn new(m: &SuperprocessModel, triple: &SpectralTriple, opts: YaglomOptions) -> Result<Self> {
        require_subcritical(triple)?;
        if !(opts.plateau_tol > 0.0 && opts.growth > 1.0 && opts.horizon > 1.0) {
            return Err(Error::Domain("invalid Yaglom options".into()));
        }
        let rate = triple.relaxation_rate();
        let mut checkpoints = Vec::new();
        let mut t = 1.0 / rate;
        while t < opts.horizon / rate {
            checkpoints.push(t);
            t *= opts.growth;
        }
        checkpoints.push(opts.horizon / rate);
        let v = extinction_at(m, triple, &checkpoints, &opts.solver)?;
        let survival = v
            .values
            .iter()
            .map(|x| one_minus_exp_neg(triple.nu_of(x)))
            .collect();
        Ok(YaglomTransform {
            model: m.clone(),
            triple: triple.clone(),
            opts,
            rate,
            checkpoints,
            survival,
        })
    }

    pub fn model(&self) -> &SuperprocessModel {
        &self.model
    }

    pub fn triple(&self) -> &SpectralTriple {
        &self.triple
    }

    pub fn lambda(&self) -> f64 {
        self.triple.lambda
    }

    pub fn checkpoints(&self) -> &[f64] {
        &self.checkpoints
    }

    pub fn solver_options(&self) -> &SolverOptions {
        &self.opts.solver
    }

    /// `Y(f)`.
    pub fn evaluate(&self, f: &FnVec) -> Result<f64> {
        self.evaluate_detailed(f).map(|e| e.value)
    }

    pub fn evaluate_detailed(&self, f: &FnVec) -> Result<YaglomEvaluation> {
        if f.len() != self.model.n() {
            return Err(Error::Domain("function dimension does not match the model".into()));
        }
        let exact = |value: f64| YaglomEvaluation {
            value,
            raw: value,
            previous: value,
            stop_t: 0.0,
            rate: self.rate,
        };
        if f.is_zero() {
            return Ok(exact(0.0));
        }
        if f.values().iter().all(|v| v.is_infinite()) {
            return Ok(exact(1.0));
        }
        let traj = if f.is_finite() {
            solve_cumulant_at(&self.model, &self.triple, f, &self.checkpoints, &self.opts.solver)?
        } else {
            solve_truncated(&self.model, &self.triple, f, &self.checkpoints, &self.opts.solver)?
        };
        let ratios: Vec<f64> = traj
            .values
            .iter()
            .zip(&self.survival)
            .map(|(v, s)| (one_minus_exp_neg(self.triple.nu_of(v)) / s).min(1.0))
            .collect();
        for k in 1..ratios.len() {
            let (prev, raw) = (ratios[k - 1], ratios[k]);
            if (raw - prev).abs() < self.opts.plateau_tol {
                let value = if self.opts.extrapolate {
                    let q = (-self.rate * (self.checkpoints[k] - self.checkpoints[k - 1])).exp();
                    let corrected = raw + (raw - prev) * q / (1.0 - q);
                    // the correction must stay within the plateau band
                    if (corrected - raw).abs() <= self.opts.plateau_tol {
                        corrected
                    } else {
                        raw
                    }
                } else {
                    raw
                };
                return Ok(YaglomEvaluation {
                    value: value.clamp(0.0, 1.0),
                    raw,
                    previous: prev,
                    stop_t: self.checkpoints[k],
                    rate: self.rate,
                });
            }
        }
        let n = ratios.len();
        Err(Error::NonConvergence {
            t_max: self.checkpoints[n - 1],
            prev: ratios[n.saturating_sub(2)],
            last: ratios[n - 1],
        })
    }
}

/// Yaglom transform with default options.
pub fn yaglom_transform(m: &SuperprocessModel, triple: &SpectralTriple) -> Result<YaglomTransform> {
    YaglomTransform::new(m, triple, YaglomOptions::default())
}

/// Mass decay rate `r` in `[lambda, 0)` with exponent `gamma = r / lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QsdSpec {
    r: f64,
    gamma: f64,
}

impl QsdSpec {
    pub fn new(r: f64, lambda: f64) -> Result<Self> {
        if !(lambda < 0.0) {
            return Err(Error::NotSubcritical(lambda));
        }
        if r < lambda {
            return Err(Error::NoQsd { r, lambda });
        }
        if !(r < 0.0) {
            return Err(Error::Domain(format!("mass decay rate r = {r} must be negative")));
        }
        Ok(QsdSpec { r, gamma: r / lambda })
    }

    /// The Yaglom limit itself, `r = lambda`.
    pub fn yaglom(lambda: f64) -> Result<Self> {
        QsdSpec::new(lambda, lambda)
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// `1 - e^{-G_r f} = Y(f)^{r / lambda}`.
pub fn qsd_transform(yt: &YaglomTransform, spec: &QsdSpec, f: &FnVec) -> Result<f64> {
    Ok(power(yt.evaluate(f)?, spec.gamma))
}

fn power(y: f64, gamma: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        y.powf(gamma)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("time t = {t} must be positive and finite")));
    }
    Ok(())
}

/// `|Y_r(V_t f) - e^{r t} Y_r(f)|`, the defining identity of a quasi-stationary law.
pub fn fixed_point_residual(yt: &YaglomTransform, spec: &QsdSpec, f: &FnVec, t: f64) -> Result<f64> {
    check_time(t)?;
    let vt = solve_cumulant_at(yt.model(), yt.triple(), f, &[t], yt.solver_options())?;
    let lhs = qsd_transform(yt, spec, &FnVec(vt.last().to_vec()))?;
    let rhs = (spec.r * t).exp() * qsd_transform(yt, spec, f)?;
    Ok((lhs - rhs).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MassDecay {
    /// `Y_r(v_t)`, the survival probability under the quasi-stationary start.
    pub measured: f64,
    /// `e^{r t}`.
    pub expected: f64,
}

pub fn mass_decay_check(yt: &YaglomTransform, spec: &QsdSpec, t: f64) -> Result<MassDecay> {
    check_time(t)?;
    let v = extinction_at(yt.model(), yt.triple(), &[t], yt.solver_options())?;
    Ok(MassDecay {
        measured: qsd_transform(yt, spec, &FnVec(v.last().to_vec()))?,
        expected: (spec.r * t).exp(),
    })
}

/// `|Y(V_s f) - e^{s lambda} Y(f)|`.
pub fn functional_equation_residual(yt: &YaglomTransform, f: &FnVec, s: f64) -> Result<f64> {
    check_time(s)?;
    let vs = solve_cumulant_at(yt.model(), yt.triple(), f, &[s], yt.solver_options())?;
    let lhs = yt.evaluate(&FnVec(vs.last().to_vec()))?;
    let rhs = (s * yt.lambda()).exp() * yt.evaluate(f)?;
    Ok((lhs - rhs).abs())
}

/// First time on the grid `step, 2 step, ...` at which `gamma_t(f)` moves by
/// less than `tol` over one step.
pub fn plateau_horizon(
    m: &SuperprocessModel,
    triple: &SpectralTriple,
    f: &FnVec,
    tol: f64,
    opts: &SolverOptions,
) -> Result<f64> {
    let step = 0.5 / triple.relaxation_rate();
    let mut prev = gamma_t(m, triple, f, step, opts)?;
    for k in 2..=400 {
        let t = k as f64 * step;
        let g = gamma_t(m, triple, f, t, opts)?;
        if (g - prev).abs() < tol {
            return Ok(t);
        }
        prev = g;
    }
    Err(Error::NonConvergence {
        t_max: 400.0 * step,
        prev,
        last: prev,
    })
}
