//! Invariant suites. Each suite turns the identities a module must satisfy
//! into [`CheckResult`]s on a concrete model; `superproc verify` runs them on
//! a config and the acceptance tests run them on the reference set.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cumulant::{
    extinction_function, mild_equation_residual, profile_diagnostics, ratio_diagnostic, semigroup_residual,
    solve_cumulant_at, solve_truncated, uniform_grid, SolverOptions,
};
use crate::error::{Error, Result};
use crate::model::{grey_condition_check, psi0_eval, psi0_prime_eval, psi_eval, FnVec, MeasureVec, SuperprocessModel};
use crate::oracle::{feller_cumulant, feller_extinction, feller_gamma_t, feller_yaglom, FellerParams};
use crate::qsd::{
    fixed_point_residual, functional_equation_residual, gamma_t, mass_decay_check, qsd_transform, yaglom_transform,
    QsdSpec,
};
use crate::report::{CheckResult, VerificationReport};
use crate::sampler::{empirical_laplace, path_rng, sibuya_sample, simulate_ensemble, PathConfig, SibuyaParams};
use crate::spectral::{eigen_residuals, first_moment, h1_diagnostic, mean_semigroup, principal_triple, SpectralTriple};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Model,
    Spectral,
    Cumulant,
    Qsd,
    Oracle,
    Sampler,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 7] = ["model", "spectral", "cumulant", "qsd", "oracle", "sampler", "all"];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Model => "model",
            Suite::Spectral => "spectral",
            Suite::Cumulant => "cumulant",
            Suite::Qsd => "qsd",
            Suite::Oracle => "oracle",
            Suite::Sampler => "sampler",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "model" => Suite::Model,
            "spectral" => Suite::Spectral,
            "cumulant" => Suite::Cumulant,
            "qsd" => Suite::Qsd,
            "oracle" => Suite::Oracle,
            "sampler" => Suite::Sampler,
            "all" => Suite::All,
            other => {
                return Err(Error::Domain(format!(
                    "unknown suite {other:?} (expected one of {})",
                    Suite::NAMES.join(", ")
                )))
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub solver: SolverOptions,
    pub seed: u64,
    pub mc_paths: usize,
    pub mc_dt: f64,
    pub sibuya_draws: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            solver: SolverOptions::default(),
            seed: 1,
            mc_paths: 20_000,
            mc_dt: 1e-3,
            sibuya_draws: 100_000,
        }
    }
}

/// Runs one suite. Model validation or spectral failures are returned as
/// errors; everything else becomes a failed check.
pub fn run_suite(m: &SuperprocessModel, suite: Suite, opts: &VerifyOptions) -> Result<VerificationReport> {
    m.validate().into_result()?;
    if suite == Suite::Model {
        return Ok(model_suite(m));
    }
    let triple = principal_triple(m)?;
    let mut ctx = Ctx {
        m,
        triple: &triple,
        opts,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
    };
    Ok(match suite {
        Suite::Model => unreachable!(),
        Suite::Spectral => ctx.spectral(),
        Suite::Cumulant => ctx.cumulant(),
        Suite::Qsd => ctx.qsd(),
        Suite::Oracle => ctx.oracle(),
        Suite::Sampler => ctx.sampler(),
        Suite::All => VerificationReport::merge(
            "all",
            vec![
                model_suite(m),
                ctx.spectral(),
                ctx.cumulant(),
                ctx.qsd(),
                ctx.oracle(),
                ctx.sampler(),
            ],
        ),
    })
}

fn attempt(name: &str, inputs: String, f: impl FnOnce() -> Result<CheckResult>) -> CheckResult {
    f().unwrap_or_else(|e| CheckResult::failed(name, inputs, e))
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("({})", parts.join(", "))
}

fn max_of(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(f64::NEG_INFINITY, f64::max)
}

fn model_suite(m: &SuperprocessModel) -> VerificationReport {
    let mut checks = vec![CheckResult::below(
        "model.validation",
        "violations".into(),
        m.validate().violations.len() as f64,
        0.0,
    )];
    let zs: Vec<f64> = (0..=40).map(|k| 10f64.powf(-4.0 + 0.2 * k as f64)).collect();
    for site in 0..m.n() {
        let label = &m.space.labels[site];
        let inputs = format!("site {label}, z in [1e-4, 1e4]");
        let p0: Vec<f64> = zs.iter().map(|&z| psi0_eval(m, site, z).unwrap_or(f64::NAN)).collect();
        let d0: Vec<f64> = zs.iter().map(|&z| psi0_prime_eval(m, site, z).unwrap_or(f64::NAN)).collect();
        checks.push(CheckResult::below(
            "model.psi0_below_z_dpsi0",
            inputs.clone(),
            max_of(zs.iter().zip(p0.iter().zip(&d0)).map(|(z, (p, d))| (p - z * d) / (z * d).max(1.0))),
            1e-12,
        ));
        let beta = m.mech.beta[site];
        checks.push(CheckResult::below(
            "model.psi_is_psi0_minus_beta_z",
            inputs.clone(),
            max_of(zs.iter().zip(&p0).map(|(&z, p)| {
                let psi = psi_eval(m, site, z).unwrap_or(f64::NAN);
                (psi - (p - beta * z)).abs() / psi.abs().max(1.0)
            })),
            1e-12,
        ));
        checks.push(CheckResult::below(
            "model.psi0_nondecreasing",
            inputs.clone(),
            max_of(p0.windows(2).map(|w| w[0] - w[1])),
            0.0,
        ));
        checks.push(CheckResult::below(
            "model.dpsi0_nondecreasing",
            inputs.clone(),
            max_of(d0.windows(2).map(|w| w[0] - w[1])),
            0.0,
        ));
        let fd_err = max_of(zs.iter().zip(&d0).filter(|(&z, _)| (1e-2..=1e2).contains(&z)).map(|(&z, &d)| {
            let h = 1e-4 * z;
            let fd = (psi0_eval(m, site, z + h).unwrap_or(f64::NAN) - psi0_eval(m, site, z - h).unwrap_or(f64::NAN))
                / (2.0 * h);
            (fd - d).abs() / d.abs().max(1e-12)
        }));
        checks.push(CheckResult::below(
            "model.dpsi0_matches_finite_difference",
            format!("site {label}, z in [1e-2, 1e2], h = 1e-4 z"),
            fd_err,
            1e-6,
        ));
    }
    VerificationReport::new("model", checks)
}

struct Ctx<'a> {
    m: &'a SuperprocessModel,
    triple: &'a SpectralTriple,
    opts: &'a VerifyOptions,
    rng: ChaCha8Rng,
}

impl Ctx<'_> {
    fn n(&self) -> usize {
        self.m.n()
    }

    fn random_fn(&mut self, lo: f64, hi: f64) -> FnVec {
        FnVec((0..self.n()).map(|_| self.rng.random_range(lo..hi)).collect())
    }

    /// Rate at which normalized profiles and ratios settle: the profile
    /// relaxes at the gap, the nonlinear correction at `|lambda|`.
    fn settle_rate(&self) -> f64 {
        if self.triple.lambda < 0.0 {
            self.triple.relaxation_rate()
        } else {
            self.triple.gap
        }
    }

    fn spectral(&mut self) -> VerificationReport {
        let (m, triple) = (self.m, self.triple);
        let mut checks = Vec::new();
        let scale = crate::linalg::generator(m).amax().max(1.0);
        let res = eigen_residuals(m, triple);
        checks.push(CheckResult::below("spectral.right_eigen_residual", "A phi - lambda phi".into(), res.right, 1e-10 * scale));
        checks.push(CheckResult::below("spectral.left_eigen_residual", "nu A - lambda nu".into(), res.left, 1e-10 * scale));

        let mut pairs = vec![(0.3, 1.1), (1.7, 2.2), (0.05, 4.9)];
        for _ in 0..3 {
            pairs.push((self.rng.random_range(0.0..5.0), self.rng.random_range(0.0..5.0)));
        }
        for (t, s) in pairs {
            let inputs = format!("t = {t:.4}, s = {s:.4}");
            checks.push(attempt("spectral.semigroup", inputs.clone(), || {
                let whole = mean_semigroup(m, t + s)?;
                let prod = mean_semigroup(m, t)? * mean_semigroup(m, s)?;
                Ok(CheckResult::below(
                    "spectral.semigroup",
                    inputs,
                    (&whole - prod).amax(),
                    1e-10 * whole.amax().max(1.0),
                ))
            }));
        }
        let phi = DVector::from_column_slice(&triple.phi);
        let nu = DVector::from_column_slice(&triple.nu);
        for t in [0.1, 1.0, 10.0] {
            let inputs = format!("t = {t}");
            let growth = (triple.lambda * t).exp();
            let tol = 1e-9 * growth.max(1.0);
            checks.push(attempt("spectral.phi_eigenfunction_of_semigroup", inputs.clone(), || {
                let p = mean_semigroup(m, t)?;
                Ok(CheckResult::below(
                    "spectral.phi_eigenfunction_of_semigroup",
                    inputs.clone(),
                    (&p * &phi - growth * &phi).amax(),
                    tol,
                ))
            }));
            checks.push(attempt("spectral.nu_eigenmeasure_of_semigroup", inputs.clone(), || {
                let p = mean_semigroup(m, t)?;
                Ok(CheckResult::below(
                    "spectral.nu_eigenmeasure_of_semigroup",
                    inputs.clone(),
                    (p.transpose() * &nu - growth * &nu).amax(),
                    tol,
                ))
            }));
        }
        if self.n() == 1 {
            checks.push(attempt("spectral.h1_exact_on_one_site", "t = 1".into(), || {
                Ok(CheckResult::below("spectral.h1_exact_on_one_site", "t = 1".into(), h1_diagnostic(m, triple, 1.0)?.value, 1e-12))
            }));
        } else {
            let (t3, t10) = (3.0 / triple.gap, 10.0 / triple.gap);
            let inputs = format!("t = 3/gap = {t3:.4}, 10/gap = {t10:.4}");
            checks.push(attempt("spectral.h1_decreasing", inputs.clone(), || {
                let d = h1_diagnostic(m, triple, t10)?.value - h1_diagnostic(m, triple, t3)?.value;
                Ok(CheckResult::below("spectral.h1_decreasing", inputs.clone(), d, 0.0))
            }));
            checks.push(attempt("spectral.h1_small", inputs.clone(), || {
                Ok(CheckResult::below("spectral.h1_small", inputs.clone(), h1_diagnostic(m, triple, t10)?.value, 1e-2))
            }));
        }
        VerificationReport::new("spectral", checks)
    }

    fn cumulant(&mut self) -> VerificationReport {
        let (m, triple) = (self.m, self.triple);
        let opts = self.opts.solver.clone();
        let n = self.n();
        let t_end = 2.0;
        let grid = uniform_grid(0.0, t_end, 20);
        let mut checks = Vec::new();

        checks.push(attempt("cumulant.zero_is_fixed", "f = 0".into(), || {
            let tr = solve_cumulant_at(m, triple, &FnVec::zeros(n), &grid, &opts)?;
            Ok(CheckResult::below(
                "cumulant.zero_is_fixed",
                "f = 0".into(),
                max_of(tr.values.iter().flatten().map(|v| v.abs())),
                0.0,
            ))
        }));

        for _ in 0..3 {
            let f = self.random_fn(0.0, 2.0);
            let bump = self.random_fn(0.0, 1.0);
            let g = FnVec(f.values().iter().zip(bump.values()).map(|(a, b)| a + b).collect());
            let inputs = format!("f = {}, g = {}, t in [0, {t_end}]", fmt_vec(f.values()), fmt_vec(g.values()));
            let vf = solve_cumulant_at(m, triple, &f, &grid, &opts);
            let vg = solve_cumulant_at(m, triple, &g, &grid, &opts);
            checks.push(attempt("cumulant.monotone_in_f", inputs.clone(), || {
                let (vf, vg) = (vf.clone()?, vg?);
                let d = max_of(vf.values.iter().flatten().zip(vg.values.iter().flatten()).map(|(a, b)| a - b));
                Ok(CheckResult::below("cumulant.monotone_in_f", inputs.clone(), d, 1e-9))
            }));
            checks.push(attempt("cumulant.dominated_by_mean", inputs.clone(), || {
                let vf = vf?;
                let fv = DVector::from_column_slice(f.values());
                let mut d = f64::NEG_INFINITY;
                for (&t, v) in grid.iter().zip(&vf.values) {
                    let pf = mean_semigroup(m, t)? * &fv;
                    d = d.max(max_of(v.iter().zip(pf.iter()).map(|(a, b)| a - b)));
                }
                Ok(CheckResult::below("cumulant.dominated_by_mean", inputs.clone(), d, 1e-9))
            }));
        }

        let f = self.random_fn(0.2, 2.0);
        let inputs = format!("f = {}, t = 1, u in {{0, 0.25, .., 1}}", fmt_vec(f.values()));
        checks.push(attempt("cumulant.concave_in_scale", inputs.clone(), || {
            let vals = (0..=4)
                .map(|k| Ok(solve_cumulant_at(m, triple, &f.scaled(k as f64 * 0.25), &[1.0], &opts)?.last().to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let d = max_of((1..4).flat_map(|k| (0..n).map(move |i| (k, i))).map(|(k, i)| {
                0.5 * (vals[k - 1][i] + vals[k + 1][i]) - vals[k][i]
            }));
            Ok(CheckResult::below("cumulant.concave_in_scale", inputs.clone(), d, 1e-9))
        }));

        let f = self.random_fn(0.0, 2.0);
        let inputs = format!("f = {}, t = s = 0.7", fmt_vec(f.values()));
        checks.push(attempt("cumulant.semigroup", inputs.clone(), || {
            Ok(CheckResult::below("cumulant.semigroup", inputs.clone(), semigroup_residual(m, triple, &f, 0.7, 0.7, &opts)?, 1e-6))
        }));
        let f = self.random_fn(0.0, 2.0);
        let inputs = format!("f = {}, t = 1", fmt_vec(f.values()));
        checks.push(attempt("cumulant.mild_equation", inputs.clone(), || {
            Ok(CheckResult::below("cumulant.mild_equation", inputs.clone(), mild_equation_residual(m, triple, &f, 1.0, &opts)?, 1e-6))
        }));

        let eps = 1e-6;
        for t in [1.0, 2.0] {
            let inputs = format!("f = 1e-6 phi, t = {t}");
            checks.push(attempt("cumulant.linear_regime", inputs.clone(), || {
                let f = FnVec(triple.phi.iter().map(|p| eps * p).collect());
                let v = solve_cumulant_at(m, triple, &f, &[t], &opts)?;
                let growth = (triple.lambda * t).exp();
                let d = max_of(v.last().iter().zip(&triple.phi).map(|(v, p)| (v / (eps * growth * p) - 1.0).abs()));
                Ok(CheckResult::below("cumulant.linear_regime", inputs.clone(), d, 1e-4))
            }));
        }

        let grey = grey_condition_check(m);
        let inputs = format!("t in [{}, {t_end}], grey verdict {:?}", opts.t_min, grey.verdict);
        let ext = extinction_function(m, triple, t_end, &opts);
        checks.push(attempt("cumulant.extinction_finite", inputs.clone(), || {
            let v = ext.clone()?;
            let bad = v.values.iter().flatten().filter(|x| !x.is_finite()).count();
            Ok(CheckResult::below("cumulant.extinction_finite", inputs.clone(), bad as f64, 0.0))
        }));
        let g = self.random_fn(0.0, 5.0);
        let inputs = format!("g = {}, t in [{}, {t_end}]", fmt_vec(g.values()), opts.t_min);
        checks.push(attempt("cumulant.extinction_dominates", inputs.clone(), || {
            let v = ext?;
            let vg = solve_cumulant_at(m, triple, &g, &v.times, &opts)?;
            let d = max_of(
                vg.values
                    .iter()
                    .flatten()
                    .zip(v.values.iter().flatten())
                    .map(|(a, b)| (a - b) / b.abs().max(1.0)),
            );
            Ok(CheckResult::below("cumulant.extinction_dominates", inputs.clone(), d, 1e-9))
        }));
        let caps = [16.0, 256.0, 4096.0];
        let times = uniform_grid(opts.t_min, t_end, 20);
        let inputs = format!("caps {caps:?}, t in [{}, {t_end}]", opts.t_min);
        checks.push(attempt("cumulant.truncation_monotone", inputs.clone(), || {
            let runs = caps
                .iter()
                .map(|&c| solve_truncated(m, triple, &FnVec::constant(n, c), &times, &opts))
                .collect::<Result<Vec<_>>>()?;
            let d = max_of(runs.windows(2).flat_map(|w| {
                w[0].values
                    .iter()
                    .flatten()
                    .zip(w[1].values.iter().flatten())
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>()
            }));
            Ok(CheckResult::below("cumulant.truncation_monotone", inputs.clone(), d, 1e-9))
        }));

        if triple.lambda < 0.0 {
            let t = 10.0 / self.settle_rate();
            let inputs = format!("f = 1, t = 10/rate = {t:.4}, s = 1");
            checks.push(attempt("cumulant.ratio_limit", inputs.clone(), || {
                let r = ratio_diagnostic(m, triple, &FnVec::constant(n, 1.0), t, 1.0, &opts)?;
                Ok(CheckResult::close("cumulant.ratio_limit", inputs.clone(), r, triple.lambda.exp(), 1e-3))
            }));
        }
        if n == 1 {
            checks.push(attempt("cumulant.profile_exact_on_one_site", "f = 1, t = 1".into(), || {
                let p = profile_diagnostics(m, triple, &FnVec::constant(1, 1.0), 1.0, &opts)?;
                Ok(CheckResult::below("cumulant.profile_exact_on_one_site", "f = 1, t = 1".into(), p.c4_sup, 1e-12))
            }));
        } else {
            let mut f = vec![0.0; n];
            f[0] = 1.0;
            let f = FnVec(f);
            let rate = self.settle_rate();
            let inputs = format!("f = e_0, t = k/rate, k = 1..5, rate = {rate:.4}");
            let profile = (1..=5)
                .map(|k| profile_diagnostics(m, triple, &f, k as f64 / rate, &opts).map(|p| p.c4_sup))
                .collect::<Result<Vec<_>>>();
            checks.push(attempt("cumulant.profile_decreasing", inputs.clone(), || {
                let c = profile.clone()?;
                Ok(CheckResult::below("cumulant.profile_decreasing", inputs.clone(), max_of(c.windows(2).map(|w| w[1] - w[0])), 0.0))
            }));
            checks.push(attempt("cumulant.profile_flat", inputs.clone(), || {
                Ok(CheckResult::below("cumulant.profile_flat", inputs.clone(), profile?[4], 0.05))
            }));
        }
        VerificationReport::new("cumulant", checks)
    }

    fn qsd(&mut self) -> VerificationReport {
        let (m, triple) = (self.m, self.triple);
        if triple.lambda >= 0.0 {
            return VerificationReport::skipped("qsd", &format!("not subcritical (lambda = {})", triple.lambda));
        }
        let lambda = triple.lambda;
        let n = self.n();
        let yt = match yaglom_transform(m, triple) {
            Ok(y) => y,
            Err(e) => return VerificationReport::new("qsd", vec![CheckResult::failed("qsd.yaglom_transform", String::new(), e)]),
        };
        let mut checks = Vec::new();
        let y = |f: &FnVec| yt.evaluate(f);

        checks.push(attempt("qsd.yaglom_at_zero", "f = 0".into(), || {
            Ok(CheckResult::close("qsd.yaglom_at_zero", "f = 0".into(), y(&FnVec::zeros(n))?, 0.0, 0.0))
        }));
        checks.push(attempt("qsd.yaglom_at_infinity", "f = inf".into(), || {
            Ok(CheckResult::close("qsd.yaglom_at_infinity", "f = inf".into(), y(&FnVec::infinity(n))?, 1.0, 0.0))
        }));
        checks.push(attempt("qsd.gamma_t_at_infinity", "f = inf, t = 1".into(), || {
            let g = gamma_t(m, triple, &FnVec::infinity(n), 1.0, &yt.solver_options().clone())?;
            Ok(CheckResult::close("qsd.gamma_t_at_infinity", "f = inf, t = 1".into(), g, 1.0, 0.0))
        }));
        for _ in 0..3 {
            let f = self.random_fn(0.0, 2.0);
            let bump = self.random_fn(0.0, 1.0);
            let g = FnVec(f.values().iter().zip(bump.values()).map(|(a, b)| a + b).collect());
            let inputs = format!("f = {}, g = {}", fmt_vec(f.values()), fmt_vec(g.values()));
            checks.push(attempt("qsd.yaglom_monotone_in_range", inputs.clone(), || {
                let (yf, yg) = (y(&f)?, y(&g)?);
                let d = (yf - yg).max(-yf).max(yg - 1.0);
                Ok(CheckResult::below("qsd.yaglom_monotone_in_range", inputs.clone(), d, 1e-9))
            }));
        }
        let f = self.random_fn(0.5, 2.0);
        let inputs = format!("f = {}, u in {{0, 0.25, .., 1}}", fmt_vec(f.values()));
        checks.push(attempt("qsd.log_transform_concave", inputs.clone(), || {
            let g = (0..=4)
                .map(|k| Ok(-(-y(&f.scaled(k as f64 * 0.25))?).ln_1p()))
                .collect::<Result<Vec<_>>>()?;
            let d = max_of((1..4).map(|k| 0.5 * (g[k - 1] + g[k + 1]) - g[k]));
            Ok(CheckResult::below("qsd.log_transform_concave", inputs.clone(), d, 1e-8))
        }));
        for s in [0.3, 0.7] {
            let f = self.random_fn(0.0, 2.0);
            let inputs = format!("f = {}, s = {s}", fmt_vec(f.values()));
            checks.push(attempt("qsd.functional_equation", inputs.clone(), || {
                Ok(CheckResult::below("qsd.functional_equation", inputs.clone(), functional_equation_residual(&yt, &f, s)?, 1e-4))
            }));
        }
        let f = self.random_fn(0.2, 2.0);
        for frac in [1.0, 0.5, 0.25] {
            let spec = match QsdSpec::new(frac * lambda, lambda) {
                Ok(s) => s,
                Err(e) => {
                    checks.push(CheckResult::failed("qsd.spec", format!("r = {frac} lambda"), e));
                    continue;
                }
            };
            for t in [0.5, 1.0, 2.0] {
                let inputs = format!("r = {frac} lambda, f = {}, t = {t}", fmt_vec(f.values()));
                checks.push(attempt("qsd.fixed_point", inputs.clone(), || {
                    Ok(CheckResult::below("qsd.fixed_point", inputs.clone(), fixed_point_residual(&yt, &spec, &f, t)?, 1e-3))
                }));
                let inputs = format!("r = {frac} lambda, t = {t}");
                checks.push(attempt("qsd.mass_decay", inputs.clone(), || {
                    let md = mass_decay_check(&yt, &spec, t)?;
                    Ok(CheckResult::close("qsd.mass_decay", inputs.clone(), md.measured / md.expected, 1.0, 1e-3))
                }));
            }
        }
        let inputs = format!("f = {}, r1 = lambda/2, r2 = lambda/4", fmt_vec(f.values()));
        checks.push(attempt("qsd.exponent_consistency", inputs.clone(), || {
            let s1 = QsdSpec::new(0.5 * lambda, lambda)?;
            let s2 = QsdSpec::new(0.25 * lambda, lambda)?;
            let a = qsd_transform(&yt, &s1, &f)?.powf(s2.r() / s1.r());
            Ok(CheckResult::close("qsd.exponent_consistency", inputs.clone(), a, qsd_transform(&yt, &s2, &f)?, 1e-10))
        }));
        let rejected = matches!(QsdSpec::new(1.5 * lambda, lambda), Err(Error::NoQsd { .. }));
        checks.push(CheckResult::close(
            "qsd.below_lambda_rejected",
            "r = 1.5 lambda".into(),
            if rejected { 1.0 } else { 0.0 },
            1.0,
            0.0,
        ));
        VerificationReport::new("qsd", checks)
    }

    fn oracle(&mut self) -> VerificationReport {
        let Some(p) = FellerParams::from_model(self.m) else {
            return VerificationReport::skipped("oracle", "closed forms exist only for one-site models without jumps or killing");
        };
        let (m, triple) = (self.m, self.triple);
        let opts = self.opts.solver.clone();
        let mut checks = Vec::new();
        let times: Vec<f64> = (0..=50).map(|k| 0.01 + (5.0 - 0.01) * k as f64 / 50.0).collect();
        for f in [0.1, 1.0, 10.0] {
            let inputs = format!("f = {f}, t in [0.01, 5]");
            checks.push(attempt("oracle.cumulant", inputs.clone(), || {
                let tr = solve_cumulant_at(m, triple, &FnVec::constant(1, f), &times, &opts)?;
                let mut worst: f64 = 0.0;
                for (&t, v) in times.iter().zip(&tr.values) {
                    let exact = feller_cumulant(p, f, t)?;
                    worst = worst.max((v[0] / exact - 1.0).abs());
                }
                Ok(CheckResult::below("oracle.cumulant", inputs.clone(), worst, 1e-6))
            }));
        }
        let inputs = "t in [0.01, 5]".to_string();
        checks.push(attempt("oracle.extinction", inputs.clone(), || {
            let tr = solve_truncated(m, triple, &FnVec::infinity(1), &times, &opts)?;
            let mut worst: f64 = 0.0;
            for (&t, v) in times.iter().zip(&tr.values) {
                worst = worst.max((v[0] / feller_extinction(p, t)? - 1.0).abs());
            }
            Ok(CheckResult::below("oracle.extinction", inputs.clone(), worst, 1e-6))
        }));
        match yaglom_transform(m, triple) {
            Ok(yt) => {
                for f in [0.25, 0.5, 1.0, 2.0, 4.0] {
                    let inputs = format!("f = {f}");
                    checks.push(attempt("oracle.yaglom", inputs.clone(), || {
                        Ok(CheckResult::close("oracle.yaglom", inputs.clone(), yt.evaluate(&FnVec::constant(1, f))?, feller_yaglom(p, f)?, 1e-4))
                    }));
                }
                Self::oracle_mass_decay(p, &mut checks);
            }
            Err(e) => checks.push(CheckResult::failed("oracle.yaglom", String::new(), e)),
        }
        let t_far = 20.0 / p.b();
        let inputs = format!("f = 1, t = 20/b = {t_far}");
        checks.push(attempt("oracle.gamma_t_limit", inputs.clone(), || {
            let g = gamma_t(m, triple, &FnVec::constant(1, 1.0), t_far, &SolverOptions::tight())?;
            Ok(CheckResult::close("oracle.gamma_t_limit", inputs.clone(), g, feller_yaglom(p, 1.0)?, 1e-6))
        }));
        let inputs = "f = 1, t = ln 2".to_string();
        checks.push(attempt("oracle.gamma_t", inputs.clone(), || {
            let t = std::f64::consts::LN_2;
            let g = gamma_t(m, triple, &FnVec::constant(1, 1.0), t, &SolverOptions::tight())?;
            Ok(CheckResult::close("oracle.gamma_t", inputs.clone(), g, feller_gamma_t(p, 1.0, t)?, 1e-7))
        }));
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let (f, t, s) = (
                self.rng.random_range(0.0..10.0),
                self.rng.random_range(0.0..3.0),
                self.rng.random_range(0.0..3.0),
            );
            let lhs = feller_cumulant(p, f, t + s).unwrap_or(f64::NAN);
            let rhs = feller_cumulant(p, feller_cumulant(p, f, s).unwrap_or(f64::NAN), t).unwrap_or(f64::NAN);
            worst = worst.max((lhs - rhs).abs());
        }
        checks.push(CheckResult::below("oracle.flow_property", "20 random (f, t, s)".into(), worst, 1e-12));
        VerificationReport::new("oracle", checks)
    }

    fn oracle_mass_decay(p: FellerParams, checks: &mut Vec<CheckResult>) {
        let mut worst: f64 = 0.0;
        for t in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let v = feller_extinction(p, t).unwrap_or(f64::NAN);
            worst = worst.max((feller_yaglom(p, v).unwrap_or(f64::NAN) - (-p.b() * t).exp()).abs());
        }
        checks.push(CheckResult::below("oracle.mass_decay", "t in {0.25, .., 4}".into(), worst, 1e-10));
    }

    fn sampler(&mut self) -> VerificationReport {
        let (m, triple) = (self.m, self.triple);
        let n = self.n();
        let opts = &self.opts;
        let t = 1.0;
        let mu = MeasureVec(vec![1.0; n]);
        let f = FnVec::constant(n, 1.0);
        let cfg = PathConfig::new(opts.mc_dt, t, opts.seed, opts.mc_paths);
        let mut checks = Vec::new();
        let base = format!("N = {}, dt = {}, t = {t}, mu = 1 per site", opts.mc_paths, opts.mc_dt);
        let ens = match simulate_ensemble(m, &mu, &cfg) {
            Ok(e) => e,
            Err(e) => return VerificationReport::new("sampler", vec![CheckResult::failed("sampler.simulate", base, e)]),
        };
        let inputs = format!("{base}, f = 1");
        checks.push(attempt("sampler.laplace", inputs.clone(), || {
            let est = empirical_laplace(&ens, &f)?;
            let v = solve_cumulant_at(m, triple, &f, &[t], &opts.solver)?;
            let exact = (-FnVec(v.last().to_vec()).integrate(mu.weights())).exp();
            Ok(CheckResult::close("sampler.laplace", inputs.clone(), est.mean, exact, 3.0 * est.se))
        }));
        checks.push(attempt("sampler.survival", base.clone(), || {
            let est = ens.survival_fraction()?;
            let v = solve_truncated(m, triple, &FnVec::infinity(n), &[t], &opts.solver)?;
            let exact = -(-FnVec(v.last().to_vec()).integrate(mu.weights())).exp_m1();
            Ok(CheckResult::close("sampler.survival", base.clone(), est.mean, exact, 3.0 * est.se))
        }));
        checks.push(attempt("sampler.mean_mass", base.clone(), || {
            let est = ens.mean_mass()?;
            let exact = first_moment(m, &mu, &f, t)?;
            Ok(CheckResult::close("sampler.mean_mass", base.clone(), est.mean, exact, 3.0 * est.se))
        }));
        let small = PathConfig {
            n_paths: opts.mc_paths.min(256),
            ..cfg
        };
        let inputs = format!("N = {}, 1 vs 2 worker threads", small.n_paths);
        checks.push(attempt("sampler.deterministic", inputs.clone(), || {
            let one = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .map_err(|e| Error::Domain(e.to_string()))?
                .install(|| simulate_ensemble(m, &mu, &small))?;
            let two = rayon::ThreadPoolBuilder::new()
                .num_threads(2)
                .build()
                .map_err(|e| Error::Domain(e.to_string()))?
                .install(|| simulate_ensemble(m, &mu, &small))?;
            let same = one == two && one.terminal_states[..] == ens.terminal_states[..small.n_paths];
            Ok(CheckResult::close("sampler.deterministic", inputs.clone(), if same { 1.0 } else { 0.0 }, 1.0, 0.0))
        }));
        let params = SibuyaParams::new(0.5).expect("valid gamma");
        let mut rng = path_rng(opts.seed, u64::MAX);
        let draws: Vec<u64> = (0..opts.sibuya_draws).map(|_| sibuya_sample(&params, &mut rng)).collect();
        for s in [0.25, 0.5, 0.75] {
            let inputs = format!("gamma = 0.5, s = {s}, N = {}", opts.sibuya_draws);
            checks.push(attempt("sampler.sibuya_pgf", inputs.clone(), || {
                let est = crate::sampler::Estimate::from_samples(draws.iter().map(|&z| pow_count(s, z)))?;
                let exact = 1.0 - (1.0 - s).powf(0.5);
                Ok(CheckResult::close("sampler.sibuya_pgf", inputs.clone(), est.mean, exact, 3.0 * est.se))
            }));
        }
        VerificationReport::new("sampler", checks)
    }
}

/// `s^z` for a possibly huge count.
pub(crate) fn pow_count(s: f64, z: u64) -> f64 {
    if z > i32::MAX as u64 {
        s.powf(z as f64)
    } else {
        s.powi(z as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for name in Suite::NAMES {
            assert_eq!(name.parse::<Suite>().unwrap().name(), name);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn model_suite_passes_on_feller() {
        let r = run_suite(&SuperprocessModel::feller(1.0, 1.0), Suite::Model, &VerifyOptions::default()).unwrap();
        assert!(r.all_passed(), "{r:#?}");
    }

    #[test]
    fn oracle_suite_skips_multisite() {
        let m = crate::config::parse_model(
            r#"{"states": ["a", "b"], "rates": [[-1, 1], [1, -1]], "beta": [-1, -1], "sigma": [1, 1]}"#,
        )
        .unwrap();
        let r = run_suite(&m, Suite::Oracle, &VerifyOptions::default()).unwrap();
        assert!(r.checks.is_empty() && r.note.is_some());
    }
}
