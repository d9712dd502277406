//! Cumulant (log-Laplace) semigroup `V_t f`.
//!
//! On a finite space the cumulant equation is the ODE
//!
//! ```text
//! d/dt V_t f = (Q + diag beta) V_t f - Psi_0(V_t f),   V_0 f = f,
//! ```
//!
//! which is integrated in the rescaled variable `W_t = e^{-lambda t} V_t f`.
//! `W` stays of order one as `t` grows, so tolerances act relatively on the
//! exponentially small `V_t f` that the conditioned limits are built from.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::generator;
use crate::model::{psi0, FnVec, SuperprocessModel};
use crate::ode::{Dopri, OdeOptions, OdeStats};
use crate::spectral::{mean_semigroup, SpectralTriple};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    /// Caps applied to `+inf` entries, increasing.
    pub truncation_sequence: Vec<f64>,
    pub truncation_tol: f64,
    /// First reported time for trajectories started from `+inf`.
    pub t_min: f64,
    /// Number of output intervals on `[0, T]`.
    pub grid_points: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: f64::INFINITY,
            truncation_sequence: (4..=40).map(|k| 2f64.powi(k)).collect(),
            truncation_tol: 1e-8,
            t_min: 1e-3,
            grid_points: 100,
        }
    }
}

impl SolverOptions {
    pub fn tight() -> Self {
        SolverOptions {
            rel_tol: 1e-11,
            abs_tol: 1e-13,
            ..SolverOptions::default()
        }
    }

    fn ode(&self) -> OdeOptions {
        OdeOptions {
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            max_step: self.max_step,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0 && self.truncation_tol > 0.0) {
            return Err(Error::Domain("solver tolerances must be positive".into()));
        }
        if self.truncation_sequence.windows(2).any(|w| w[1] <= w[0])
            || self.truncation_sequence.is_empty()
        {
            return Err(Error::Domain("truncation sequence must be non-empty and increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
    /// Number of truncation caps solved (0 for finite initial data).
    pub caps_tried: usize,
    /// Last relative change between consecutive caps.
    pub truncation_change: f64,
}

impl SolverStats {
    fn absorb(&mut self, s: OdeStats) {
        self.accepted += s.accepted;
        self.rejected += s.rejected;
        self.evaluations += s.evaluations;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CumulantTrajectory {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub f0: FnVec,
    pub truncation_level: Option<f64>,
    pub solver_stats: SolverStats,
}

impl CumulantTrajectory {
    pub fn last(&self) -> &[f64] {
        self.values.last().expect("non-empty trajectory")
    }

    /// CSV with header `t,V[label]...`, plus a `cap` column when the
    /// trajectory was started from `+inf`.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("t");
        for l in labels {
            out.push_str(&format!(",V[{l}]"));
        }
        if self.truncation_level.is_some() {
            out.push_str(",cap");
        }
        out.push('\n');
        for (t, v) in self.times.iter().zip(&self.values) {
            out.push_str(&t.to_string());
            for x in v {
                out.push(',');
                out.push_str(&x.to_string());
            }
            if let Some(cap) = self.truncation_level {
                out.push(',');
                out.push_str(&cap.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Solves the cumulant ODE for finite initial data at the given sorted times.
struct Integrator<'a> {
    model: &'a SuperprocessModel,
    gen: DMatrix<f64>,
    lambda: f64,
}

impl<'a> Integrator<'a> {
    fn new(model: &'a SuperprocessModel, triple: &SpectralTriple) -> Self {
        Integrator {
            model,
            gen: generator(model),
            lambda: triple.lambda,
        }
    }

    fn run(&self, f: &[f64], times: &[f64], opts: OdeOptions) -> Result<(Vec<Vec<f64>>, OdeStats)> {
        let n = f.len();
        let shifted = &self.gen - DMatrix::<f64>::identity(n, n) * self.lambda;
        let lambda = self.lambda;
        let model = self.model;
        let rhs = |t: f64, w: &[f64], dw: &mut [f64]| {
            let s = (lambda * t).exp();
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += shifted[(i, j)] * w[j];
                }
                let wi = w[i].max(0.0);
                let z = s * wi;
                // e^{-lambda t} psi_0(e^{lambda t} w) written to survive underflow of s
                let damp = if z > 0.0 { psi0(model, i, z) / z * wi } else { 0.0 };
                dw[i] = acc - damp;
            }
        };
        let mut solver = Dopri::new(rhs, 0.0, f.to_vec(), opts);
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            if t > 0.0 {
                solver.advance_to(t)?;
            }
            let s = (lambda * t).exp();
            out.push(solver.y().iter().map(|w| (w * s).max(0.0)).collect());
        }
        Ok((out, solver.stats))
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("output times must be finite, non-negative and sorted".into()));
    }
    Ok(())
}

pub fn uniform_grid(t0: f64, t_end: f64, intervals: usize) -> Vec<f64> {
    let k = intervals.max(1);
    (0..=k)
        .map(|i| if i == k { t_end } else { t0 + (t_end - t0) * i as f64 / k as f64 })
        .collect()
}

/// `V_t f` at the given times for finite `f`.
pub fn solve_cumulant_at(
    m: &SuperprocessModel,
    triple: &SpectralTriple,
    f: &FnVec,
    times: &[f64],
    opts: &SolverOptions,
) -> Result<CumulantTrajectory> {
    if !f.is_finite() {
        return Err(Error::Domain("solve_cumulant needs finite initial data; use solve_truncated".into()));
    }
    if f.len() != m.n() {
        return Err(Error::Domain(format!("function has {} entries, model has {}", f.len(), m.n())));
    }
    check_times(times)?;
    opts.validate()?;
    let (values, ode) = Integrator::new(m, triple).run(f.values(), times, opts.ode())?;
    let mut solver_stats = SolverStats::default();
    solver_stats.absorb(ode);
    Ok(CumulantTrajectory {
        times: times.to_vec(),
        values,
        f0: f.clone(),
        truncation_level: None,
        solver_stats,
    })
}

/// `V_t f` on a uniform grid over `[0, t_end]`.
pub fn solve_cumulant(
    m: &SuperprocessModel,
    triple: &SpectralTriple,
    f: &FnVec,
    t_end: f64,
    opts: &SolverOptions,
) -> Result<CumulantTrajectory> {
    if !(t_end > 0.0) {
        return Err(Error::Domain(format!("horizon T = {t_end} must be positive")));
    }
    solve_cumulant_at(m, triple, f, &uniform_grid(0.0, t_end, opts.grid_points), opts)
}

/// `V_t f` for `f` with `+inf` entries, as the monotone limit of `V_t min(f, n)`
/// over the truncation caps. Times must be positive.
pub fn solve_truncated(
    m: &SuperprocessModel,
    triple: &SpectralTriple,
    f: &FnVec,
    times: &[f64],
    opts: &SolverOptions,
) -> Result<CumulantTrajectory> {
    if f.is_finite() {
        return solve_cumulant_at(m, triple, f, times, opts);
    }
    check_times(times)?;
    opts.validate()?;
    if times.first().is_some_and(|&t| t <= 0.0) {
        return Err(Error::Domain("V_t of an infinite function is only reported for t > 0".into()));
    }
    let integrator = Integrator::new(m, triple);
    // inner solves run tighter than the stopping rule so solver noise cannot stall it
    let mut ode = opts.ode();
    ode.rel_tol = ode.rel_tol.min(opts.truncation_tol * 1e-2);
    ode.abs_tol = ode.abs_tol.min(opts.truncation_tol * 1e-2);
    let mut stats = SolverStats::default();
    let mut prev: Option<Vec<Vec<f64>>> = None;
    let mut change = f64::INFINITY;
    for &cap in &opts.truncation_sequence {
        let (values, s) = integrator.run(f.capped(cap).values(), times, ode)?;
        stats.absorb(s);
        stats.caps_tried += 1;
        if let Some(p) = &prev {
            change = values
                .iter()
                .flatten()
                .zip(p.iter().flatten())
                .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() / a.abs() })
                .fold(0.0, f64::max);
            if change < opts.truncation_tol {
                stats.truncation_change = change;
                return Ok(CumulantTrajectory {
                    times: times.to_vec(),
                    values,
                    f0: f.clone(),
                    truncation_level: Some(cap),
                    solver_stats: stats,
                });
            }
        }
        prev = Some(values);
    }
    Err(Error::Divergence {
        cap: *opts.truncation_sequence.last().expect("validated"),
        last_change: change,
    })
}

/// Extinction function `v_t = V_t(inf * 1)` on `[t_min, T]`.
pub fn extinction_function(
    m: &SuperprocessModel,
    triple: &SpectralTriple,
    t_end: f64,
    opts: &SolverOptions,
) -> Result<CumulantTrajectory> {
    if !(t_end > opts.t_min) {
        return Err(Error::Domain(format!("horizon T = {t_end} must exceed t_min = {}", opts.t_min)));
    }
    let times = uniform_grid(opts.t_min, t_end, opts.grid_points);
    solve_truncated(m, triple, &FnVec::infinity(m.n()), &times, opts)
}

/// `v_t` at the given positive times.
pub fn extinction_at(
    m: &SuperprocessModel,
    triple: &SpectralTriple,
    times: &[f64],
    opts: &SolverOptions,
) -> Result<CumulantTrajectory> {
    solve_truncated(m, triple, &FnVec::infinity(m.n()), times, opts)
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `|| V_{t+s} f - V_t(V_s f) ||_inf` from independent solver runs.
pub fn semigroup_residual(
    m: &SuperprocessModel,
    triple: &SpectralTriple,
    f: &FnVec,
    t: f64,
    s: f64,
    opts: &SolverOptions,
) -> Result<f64> {
    if !(t > 0.0 && s > 0.0) {
        return Err(Error::Domain("t and s must be positive".into()));
    }
    let direct = solve_cumulant_at(m, triple, f, &[t + s], opts)?;
    let inner = solve_cumulant_at(m, triple, f, &[s], opts)?;
    let outer = solve_cumulant_at(m, triple, &FnVec(inner.last().to_vec()), &[t], opts)?;
    Ok(sup_diff(direct.last(), outer.last()))
}

/// `|| V_t f + int_0^t P_{t-u} Psi_0(V_u f) du - P_t f ||_inf`, with the time
/// integral by Simpson's rule refined until two levels agree.
pub fn mild_equation_residual(
    m: &SuperprocessModel,
    triple: &SpectralTriple,
    f: &FnVec,
    t: f64,
    opts: &SolverOptions,
) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("time t = {t} must be positive")));
    }
    let n = m.n();
    let quad_tol = opts.abs_tol.max(opts.rel_tol * 1e-2);
    let mut intervals = 64usize;
    let mut prev: Option<DVector<f64>> = None;
    loop {
        let grid = uniform_grid(0.0, t, intervals);
        let traj = solve_cumulant_at(m, triple, f, &grid, opts)?;
        let h = t / intervals as f64;
        let mut integral = DVector::<f64>::zeros(n);
        for (k, (&u, v)) in grid.iter().zip(&traj.values).enumerate() {
            let w = if k == 0 || k == intervals {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let load = DVector::from_iterator(n, (0..n).map(|i| psi0(m, i, v[i])));
            integral += mean_semigroup(m, t - u)? * load * (w * h / 3.0);
        }
        let converged = prev
            .as_ref()
            .is_some_and(|p| (p - &integral).amax() < quad_tol);
        if converged || intervals >= 8192 {
            let pt_f = mean_semigroup(m, t)? * DVector::from_column_slice(f.values());
            let vt = DVector::from_column_slice(traj.last());
            return Ok((vt + integral - pt_f).amax());
        }
        prev = Some(integral);
        intervals *= 2;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileDiagnostics {
    /// `max_x |V_t f(x) / (phi(x) nu(V_t f)) - 1|`.
    pub c4_sup: f64,
    pub nu_vf: f64,
}

pub fn profile_diagnostics(
    m: &SuperprocessModel,
    triple: &SpectralTriple,
    f: &FnVec,
    t: f64,
    opts: &SolverOptions,
) -> Result<ProfileDiagnostics> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("time t = {t} must be positive")));
    }
    let traj = solve_truncated(m, triple, f, &[t], opts)?;
    let v = traj.last();
    let nu_vf = triple.nu_of(v);
    if nu_vf == 0.0 {
        // 0/0 := 0
        return Ok(ProfileDiagnostics { c4_sup: 0.0, nu_vf });
    }
    let c4_sup = v
        .iter()
        .zip(&triple.phi)
        .map(|(x, p)| (x / (p * nu_vf) - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(ProfileDiagnostics { c4_sup, nu_vf })
}

/// `nu(V_{t+s} f) / nu(V_t f)`; tends to `e^{lambda s}`.
pub fn ratio_diagnostic(
    m: &SuperprocessModel,
    triple: &SpectralTriple,
    f: &FnVec,
    t: f64,
    s: f64,
    opts: &SolverOptions,
) -> Result<f64> {
    if !(t >= 0.0 && s >= 0.0) {
        return Err(Error::Domain("t and s must be non-negative".into()));
    }
    if s == 0.0 {
        return Ok(1.0);
    }
    let traj = solve_truncated(m, triple, f, &[t, t + s], opts)?;
    let den = triple.nu_of(&traj.values[0]);
    if den == 0.0 {
        return Err(Error::Domain("nu(V_t f) = 0".into()));
    }
    Ok(triple.nu_of(&traj.values[1]) / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BranchingMechanism, RateMatrix, StateSpace};
    use crate::spectral::principal_triple;

    fn feller() -> (SuperprocessModel, SpectralTriple) {
        let m = SuperprocessModel::feller(1.0, 1.0);
        let t = principal_triple(&m).unwrap();
        (m, t)
    }

    fn riccati(f: f64, t: f64) -> f64 {
        f * (-t).exp() / (1.0 + f * (1.0 - (-t).exp()))
    }

    fn symmetric() -> (SuperprocessModel, SpectralTriple) {
        let m = SuperprocessModel::new(
            StateSpace::anonymous(2),
            RateMatrix::new(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]),
            BranchingMechanism {
                beta: vec![-1.0, -1.0],
                sigma: vec![1.0, 1.0],
                pi: vec![vec![], vec![]],
            },
        );
        let t = principal_triple(&m).unwrap();
        (m, t)
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let (m, t) = symmetric();
        let traj = solve_cumulant(&m, &t, &FnVec::zeros(2), 3.0, &SolverOptions::default()).unwrap();
        assert!(traj.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn feller_at_ln2() {
        let (m, t) = feller();
        let traj = solve_cumulant(&m, &t, &FnVec(vec![1.0]), 2f64.ln(), &SolverOptions::default()).unwrap();
        assert!((traj.last()[0] - 1.0 / 3.0).abs() < 1e-8);
        assert_eq!(traj.values[0], vec![1.0]);
    }

    #[test]
    fn small_mass_is_linear() {
        let (m, t) = symmetric();
        let eps = 1e-6;
        let f = FnVec(t.phi.iter().map(|p| p * eps).collect());
        let opts = SolverOptions {
            abs_tol: 1e-18,
            ..SolverOptions::default()
        };
        let traj = solve_cumulant(&m, &t, &f, 2.0, &opts).unwrap();
        for (s, v) in traj.times.iter().zip(&traj.values) {
            for i in 0..2 {
                let lin = eps * (t.lambda * s).exp() * t.phi[i];
                assert!((v[i] / lin - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn feller_extinction_limit() {
        let (m, t) = feller();
        let traj = extinction_at(&m, &t, &[0.5, 2f64.ln(), 1.0], &SolverOptions::default()).unwrap();
        assert!((traj.values[1][0] - 1.0).abs() < 1e-7);
        let v1 = (-1f64).exp() / (1.0 - (-1f64).exp());
        assert!((traj.values[2][0] - v1).abs() < 1e-7);
        assert!(traj.truncation_level.is_some());
    }

    #[test]
    fn noise_free_extinction_diverges() {
        let mut m = SuperprocessModel::feller(1.0, 1.0);
        m.mech.sigma[0] = 0.0;
        let t = principal_triple(&m).unwrap();
        let err = extinction_function(&m, &t, 1.0, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert!(err.to_string().contains("extinction function diverges"));
    }

    #[test]
    fn feller_semigroup_and_mild() {
        let (m, t) = feller();
        let opts = SolverOptions::default();
        let ln2 = 2f64.ln();
        assert!(semigroup_residual(&m, &t, &FnVec(vec![1.0]), ln2, ln2, &opts).unwrap() < 1e-8);
        assert_eq!(semigroup_residual(&m, &t, &FnVec(vec![0.0]), ln2, ln2, &opts).unwrap(), 0.0);
        assert!(mild_equation_residual(&m, &t, &FnVec(vec![1.0]), 1.0, &opts).unwrap() < 1e-6);
        assert_eq!(mild_equation_residual(&m, &t, &FnVec(vec![0.0]), 1.0, &opts).unwrap(), 0.0);
        // independent of the solver: closed form at t = 1
        let v1 = riccati(1.0, 1.0);
        assert!((v1 - (-1f64).exp() / (2.0 - (-1f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn symmetric_mild_residual() {
        let (m, t) = symmetric();
        let r = mild_equation_residual(&m, &t, &FnVec(vec![1.0, 0.0]), 1.0, &SolverOptions::default()).unwrap();
        assert!(r < 1e-6, "{r}");
    }

    #[test]
    fn profile_examples() {
        let (m, t) = feller();
        let opts = SolverOptions::default();
        let p = profile_diagnostics(&m, &t, &FnVec(vec![2.0]), 1.0, &opts).unwrap();
        assert!(p.c4_sup < 1e-15);
        let (m, t) = symmetric();
        let z = profile_diagnostics(&m, &t, &FnVec::zeros(2), 1.0, &opts).unwrap();
        assert_eq!(z, ProfileDiagnostics { c4_sup: 0.0, nu_vf: 0.0 });
        let f = FnVec(vec![1.0, 0.0]);
        let mut prev = f64::INFINITY;
        for k in 1..=5 {
            let c = profile_diagnostics(&m, &t, &f, k as f64 / t.gap, &opts).unwrap().c4_sup;
            assert!(c < prev);
            prev = c;
        }
        assert!(prev < 0.05);
        let inf = profile_diagnostics(&m, &t, &FnVec::infinity(2), 1.0, &opts).unwrap();
        assert!(inf.c4_sup < 1e-6 && inf.nu_vf > 0.0);
    }

    #[test]
    fn ratio_examples() {
        let (m, t) = feller();
        let opts = SolverOptions::default();
        let f = FnVec(vec![1.0]);
        assert_eq!(ratio_diagnostic(&m, &t, &f, 3.0, 0.0, &opts).unwrap(), 1.0);
        let r = ratio_diagnostic(&m, &t, &f, 10.0, 1.0, &opts).unwrap();
        assert!((r - (-1f64).exp()).abs() < 1e-3);
        let closed = riccati(1.0, 11.0) / riccati(1.0, 10.0);
        assert!((r - closed).abs() < 1e-8);
        assert!(ratio_diagnostic(&m, &t, &FnVec(vec![0.0]), 1.0, 1.0, &opts).is_err());
    }

    #[test]
    fn csv_layout() {
        let (m, t) = feller();
        let traj = extinction_function(&m, &t, 1.0, &SolverOptions { grid_points: 2, ..SolverOptions::default() }).unwrap();
        let csv = traj.to_csv(&m.space.labels);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,V[x],cap"));
        assert_eq!(csv.lines().count(), 4);
    }
}
