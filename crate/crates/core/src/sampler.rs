//! Monte Carlo engine for the multitype continuous-state branching process
//! that realizes the superprocess on a finite space.
//!
//! A step of size `h` is the composition of three moves:
//!
//! ```text
//! migrate:  X_i += h sum_{j != i} q_ji X_j
//! branch:   X_i <- exact CSBP transition with psi_i(z) = -a_i z + sigma_i^2 z^2,
//!           a_i = beta_i + q_ii - sum_k u_k w_k
//! jump:     X_i += sum_k u_k Poisson(X_i w_k h)
//! ```
//!
//! The branching move is sampled exactly as a Poisson number of exponential
//! clusters, so a site dies with its true probability inside the step.
//! Coordinates below `mass_floor` are absorbed. Every path owns a ChaCha8
//! stream keyed by `(seed, path_index)`, so ensembles are bit-identical
//! regardless of thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::cumulant::{extinction_at, SolverOptions};
use crate::error::{Error, Result};
use crate::model::{Atom, FnVec, MeasureVec, SuperprocessModel};
use crate::qsd::{plateau_horizon, QsdSpec};
use crate::spectral::SpectralTriple;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathConfig {
    pub dt: f64,
    pub t_end: f64,
    pub mass_floor: f64,
    pub seed: u64,
    pub n_paths: usize,
}

impl PathConfig {
    pub fn new(dt: f64, t_end: f64, seed: u64, n_paths: usize) -> Self {
        PathConfig {
            dt,
            t_end,
            mass_floor: 1e-12,
            seed,
            n_paths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Domain(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::Domain(format!("t_end = {} must be non-negative", self.t_end)));
        }
        if !(self.mass_floor >= 0.0) {
            return Err(Error::Domain("mass_floor must be non-negative".into()));
        }
        if self.n_paths == 0 {
            return Err(Error::Domain("n_paths must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// The RNG stream of one path.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean > 0.0 {
        Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
    } else {
        0
    }
}

/// Precomputed per-model coefficients of a step.
struct Stepper {
    n: usize,
    inflow: Vec<Vec<(usize, f64)>>,
    rate: Vec<f64>,
    var: Vec<f64>,
    atoms: Vec<Vec<Atom>>,
    floor: f64,
}

impl Stepper {
    fn new(m: &SuperprocessModel, floor: f64) -> Self {
        let n = m.n();
        let comp = m.mech.compensator();
        Stepper {
            n,
            inflow: (0..n)
                .map(|i| {
                    (0..n)
                        .filter(|&j| j != i && m.rates.get(j, i) > 0.0)
                        .map(|j| (j, m.rates.get(j, i)))
                        .collect()
                })
                .collect(),
            rate: (0..n).map(|i| m.mech.beta[i] + m.rates.get(i, i) - comp[i]).collect(),
            var: m.mech.sigma.iter().map(|s| s * s).collect(),
            atoms: m.mech.pi.clone(),
            floor,
        }
    }

    fn absorb(&self, x: f64) -> f64 {
        if x < self.floor {
            0.0
        } else {
            x
        }
    }

    fn migrate(&self, x: &mut [f64], h: f64) {
        let gain: Vec<f64> = self.inflow.iter().map(|row| row.iter().map(|&(j, q)| q * x[j]).sum()).collect();
        for (xi, g) in x.iter_mut().zip(gain) {
            *xi += h * g;
        }
    }

    /// Exact branching transition of site `i` from mass `x` over time `h`:
    /// `Gamma(N, B)` with `N ~ Poisson(x A / B)`, where
    /// `u_h(f) = A f / (1 + B f)` is the site's cumulant.
    fn branch<R: Rng + ?Sized>(&self, i: usize, x: f64, h: f64, rng: &mut R) -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        let a = self.rate[i];
        let growth = (a * h).exp();
        if self.var[i] == 0.0 {
            return self.absorb(x * growth);
        }
        let b = if a == 0.0 {
            self.var[i] * h
        } else {
            self.var[i] * (a * h).exp_m1() / a
        };
        let clusters = poisson(x * growth / b, rng);
        if clusters == 0 {
            return 0.0;
        }
        let y = Gamma::new(clusters as f64, b).expect("positive shape and scale").sample(rng);
        self.absorb(y)
    }

    /// Branches the coarse mass `a` and fine mass `b` of site `i` with their
    /// common part `min(a, b)` shared.
    fn branch_pair<R: Rng + ?Sized>(&self, i: usize, a: f64, b: f64, h: f64, rng: &mut R) -> (f64, f64) {
        let common = a.min(b);
        let shared = self.branch(i, common, h, rng);
        let ea = self.branch(i, a - common, h, rng);
        let eb = self.branch(i, b - common, h, rng);
        (shared + ea, shared + eb)
    }

    fn step<R: Rng + ?Sized>(&self, x: &mut [f64], h: f64, rng: &mut R) {
        self.migrate(x, h);
        for i in 0..self.n {
            x[i] = self.branch(i, x[i], h, rng);
            if x[i] > 0.0 {
                for a in &self.atoms[i] {
                    x[i] += poisson(x[i] * a.w * h, rng) as f64 * a.u;
                }
            }
        }
    }
}

fn total(x: &[f64]) -> f64 {
    x.iter().sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathOutcome {
    pub terminal: Vec<f64>,
    /// Mean single-step relative mass change exceeded 50%.
    pub dt_warning: bool,
}

struct ChangeMeter {
    sum: f64,
    steps: usize,
}

impl ChangeMeter {
    fn new() -> Self {
        ChangeMeter { sum: 0.0, steps: 0 }
    }

    fn record(&mut self, before: f64, after: f64) {
        if before > 0.0 {
            self.sum += (after - before).abs() / before;
            self.steps += 1;
        }
    }

    fn warned(&self) -> bool {
        self.steps > 0 && self.sum / self.steps as f64 > 0.5
    }
}

fn check_start(m: &SuperprocessModel, mu0: &MeasureVec) -> Result<()> {
    if mu0.weights().len() != m.n() {
        return Err(Error::Domain("initial measure dimension does not match the model".into()));
    }
    Ok(())
}

/// Terminal state of path `path_index`.
pub fn simulate_path(
    m: &SuperprocessModel,
    mu0: &MeasureVec,
    cfg: &PathConfig,
    path_index: u64,
) -> Result<PathOutcome> {
    cfg.validate()?;
    check_start(m, mu0)?;
    Ok(run_path(&Stepper::new(m, cfg.mass_floor), mu0, cfg, path_index))
}

fn run_path(stepper: &Stepper, mu0: &MeasureVec, cfg: &PathConfig, path_index: u64) -> PathOutcome {
    let mut rng = path_rng(cfg.seed, path_index);
    let mut x = mu0.weights().to_vec();
    let mut meter = ChangeMeter::new();
    for _ in 0..cfg.steps() {
        if x.iter().all(|&v| v == 0.0) {
            break;
        }
        let before = total(&x);
        stepper.step(&mut x, cfg.dt, &mut rng);
        meter.record(before, total(&x));
    }
    PathOutcome {
        terminal: x,
        dt_warning: meter.warned(),
    }
}

/// How per-path RNG streams were derived.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRecord {
    pub master_seed: u64,
    pub scheme: &'static str,
}

impl SeedRecord {
    fn new(seed: u64) -> Self {
        SeedRecord {
            master_seed: seed,
            scheme: "ChaCha8 seeded from the master seed, stream = path index",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleEnsemble {
    /// Original path index of each entry.
    pub path_index: Vec<u64>,
    pub terminal_states: Vec<Vec<f64>>,
    pub survived: Vec<bool>,
    pub per_path_seed: SeedRecord,
    pub dt_warnings: usize,
}

impl ParticleEnsemble {
    fn from_outcomes(outcomes: Vec<PathOutcome>, seed: u64) -> Self {
        let dt_warnings = outcomes.iter().filter(|o| o.dt_warning).count();
        let survived = outcomes.iter().map(|o| total(&o.terminal) > 0.0).collect();
        ParticleEnsemble {
            path_index: (0..outcomes.len() as u64).collect(),
            terminal_states: outcomes.into_iter().map(|o| o.terminal).collect(),
            survived,
            per_path_seed: SeedRecord::new(seed),
            dt_warnings,
        }
    }

    pub fn len(&self) -> usize {
        self.terminal_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terminal_states.is_empty()
    }

    /// Sub-ensemble of the surviving paths.
    pub fn survivors(&self) -> ParticleEnsemble {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.survived[i]).collect();
        ParticleEnsemble {
            path_index: keep.iter().map(|&i| self.path_index[i]).collect(),
            terminal_states: keep.iter().map(|&i| self.terminal_states[i].clone()).collect(),
            survived: vec![true; keep.len()],
            per_path_seed: self.per_path_seed.clone(),
            dt_warnings: self.dt_warnings,
        }
    }

    pub fn survival_fraction(&self) -> Result<Estimate> {
        Estimate::from_samples(self.survived.iter().map(|&s| if s { 1.0 } else { 0.0 }))
    }

    pub fn mean_mass(&self) -> Result<Estimate> {
        Estimate::from_samples(self.terminal_states.iter().map(|x| total(x)))
    }

    /// CSV with header `path_index,survived,X[label]...`.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("path_index,survived");
        for l in labels {
            out.push_str(&format!(",X[{l}]"));
        }
        out.push('\n');
        for ((idx, s), x) in self.path_index.iter().zip(&self.survived).zip(&self.terminal_states) {
            out.push_str(&format!("{idx},{}", u8::from(*s)));
            for v in x {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl Estimate {
    pub fn from_samples(xs: impl Iterator<Item = f64>) -> Result<Self> {
        let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for x in xs {
            n += 1;
            let d = x - mean;
            mean += d / n as f64;
            m2 += d * (x - mean);
        }
        if n == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
        Ok(Estimate {
            mean,
            se: (var / n as f64).sqrt(),
            count: n,
        })
    }

    /// `|mean - target| / se`, infinite when `se = 0` and the mean misses.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.mean - target).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.se
        }
    }
}

/// All `cfg.n_paths` paths, evaluated in parallel and merged in index order.
pub fn simulate_ensemble(m: &SuperprocessModel, mu0: &MeasureVec, cfg: &PathConfig) -> Result<ParticleEnsemble> {
    cfg.validate()?;
    check_start(m, mu0)?;
    let stepper = Stepper::new(m, cfg.mass_floor);
    let outcomes: Vec<PathOutcome> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|i| run_path(&stepper, mu0, cfg, i))
        .collect();
    Ok(ParticleEnsemble::from_outcomes(outcomes, cfg.seed))
}

/// Coarse (`dt`) and fine (`dt / 2`) ensembles driven by shared randomness.
/// The coarse branching move over `dt` is taken as two exact half moves,
/// each sharing the common mass of the two paths with the fine move. Coarse
/// jump counts are the fine second-half counts, thinned or topped up to the
/// coarse intensity; those counts are drawn after the coarse state is fixed,
/// so they are Poisson given it.
pub fn simulate_coupled(
    m: &SuperprocessModel,
    mu0: &MeasureVec,
    cfg: &PathConfig,
) -> Result<(ParticleEnsemble, ParticleEnsemble)> {
    cfg.validate()?;
    check_start(m, mu0)?;
    let stepper = Stepper::new(m, cfg.mass_floor);
    let pairs: Vec<(PathOutcome, PathOutcome)> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|i| run_coupled(&stepper, mu0, cfg, i))
        .collect();
    let (coarse, fine): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok((
        ParticleEnsemble::from_outcomes(coarse, cfg.seed),
        ParticleEnsemble::from_outcomes(fine, cfg.seed),
    ))
}

fn run_coupled(stepper: &Stepper, mu0: &MeasureVec, cfg: &PathConfig, path_index: u64) -> (PathOutcome, PathOutcome) {
    let mut rng = path_rng(cfg.seed, path_index);
    let mut coarse = mu0.weights().to_vec();
    let mut fine = coarse.clone();
    let (mut mc, mut mf) = (ChangeMeter::new(), ChangeMeter::new());
    let h = cfg.dt / 2.0;
    for _ in 0..cfg.steps() {
        if coarse.iter().chain(&fine).all(|&v| v == 0.0) {
            break;
        }
        let (before_c, before_f) = (total(&coarse), total(&fine));
        stepper.migrate(&mut coarse, cfg.dt);
        let mut fine_counts: Vec<Vec<(u64, f64)>> = vec![Vec::new(); stepper.n];
        for half in 0..2 {
            stepper.migrate(&mut fine, h);
            for i in 0..stepper.n {
                let (c, f) = stepper.branch_pair(i, coarse[i], fine[i], h, &mut rng);
                coarse[i] = c;
                fine[i] = f;
                let mut counts = Vec::with_capacity(stepper.atoms[i].len());
                for a in &stepper.atoms[i] {
                    let mean = fine[i] * a.w * h;
                    let k = poisson(mean, &mut rng);
                    fine[i] += k as f64 * a.u;
                    counts.push((k, mean));
                }
                if half == 1 {
                    fine_counts[i] = counts;
                }
            }
        }
        for i in 0..stepper.n {
            for (a, &(k, fine_mean)) in stepper.atoms[i].iter().zip(&fine_counts[i]) {
                let mean = coarse[i] * a.w * cfg.dt;
                let kc = if mean >= fine_mean {
                    k + poisson(mean - fine_mean, &mut rng)
                } else if k == 0 {
                    0
                } else {
                    Binomial::new(k, mean / fine_mean).expect("valid thinning").sample(&mut rng)
                };
                coarse[i] += kc as f64 * a.u;
            }
        }
        mc.record(before_c, total(&coarse));
        mf.record(before_f, total(&fine));
    }
    (
        PathOutcome {
            terminal: coarse,
            dt_warning: mc.warned(),
        },
        PathOutcome {
            terminal: fine,
            dt_warning: mf.warned(),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionedEnsemble {
    pub survivors: ParticleEnsemble,
    pub survival: Estimate,
    /// `1 - e^{-mu(v_t)}` from the cumulant solver.
    pub expected_survival: f64,
}

/// Simulates `cfg.n_paths` paths and keeps those alive at `cfg.t_end`.
pub fn conditioned_ensemble(
    m: &SuperprocessModel,
    triple: &SpectralTriple,
    mu0: &MeasureVec,
    cfg: &PathConfig,
    opts: &SolverOptions,
) -> Result<ConditionedEnsemble> {
    cfg.validate()?;
    check_start(m, mu0)?;
    if mu0.total() <= 0.0 {
        return Err(Error::Domain("initial measure must be non-zero".into()));
    }
    let expected_survival = if cfg.t_end > 0.0 {
        let v = extinction_at(m, triple, &[cfg.t_end], opts)?;
        -(-FnVec(v.last().to_vec()).integrate(mu0.weights())).exp_m1()
    } else {
        1.0
    };
    let expected = expected_survival * cfg.n_paths as f64;
    if expected < 100.0 {
        return Err(Error::Conditioning(format!(
            "only {expected:.1} survivors expected; use a shorter horizon or more paths"
        )));
    }
    let all = simulate_ensemble(m, mu0, cfg)?;
    let survival = all.survival_fraction()?;
    let survivors = all.survivors();
    if survivors.is_empty() {
        return Err(Error::Conditioning("no path survived".into()));
    }
    Ok(ConditionedEnsemble {
        survivors,
        survival,
        expected_survival,
    })
}

/// Mean of `exp(-<X, f>)` over the ensemble with its standard error.
pub fn empirical_laplace(ensemble: &ParticleEnsemble, f: &FnVec) -> Result<Estimate> {
    if !f.is_finite() {
        return Err(Error::Domain("empirical Laplace needs a finite test function".into()));
    }
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    Estimate::from_samples(
        ensemble
            .terminal_states
            .iter()
            .map(|x| (-f.integrate(x)).exp()),
    )
}

/// Approximate draws from the Yaglom limit: the survivors of an ensemble
/// started from `nu` and run to the horizon at which `gamma_t(1)` changes by
/// less than `plateau_tol` per half relaxation time.
#[derive(Debug, Clone)]
pub struct QsdSource {
    pub horizon: f64,
    pub dt: f64,
    pub conditioned: ConditionedEnsemble,
}

pub fn qsd_source(
    m: &SuperprocessModel,
    triple: &SpectralTriple,
    n_paths: usize,
    dt: f64,
    seed: u64,
    plateau_tol: f64,
    opts: &SolverOptions,
) -> Result<QsdSource> {
    let horizon = plateau_horizon(m, triple, &FnVec::constant(m.n(), 1.0), plateau_tol, opts)?;
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt = {dt} must be positive")));
    }
    let dt = horizon / (horizon / dt).ceil();
    let cfg = PathConfig::new(dt, horizon, seed, n_paths);
    let mu0 = MeasureVec(triple.nu.clone());
    let conditioned = conditioned_ensemble(m, triple, &mu0, &cfg, opts)?;
    Ok(QsdSource {
        horizon,
        dt,
        conditioned,
    })
}

/// Sibuya law with generating function `1 - (1 - s)^gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SibuyaParams {
    gamma: f64,
}

impl SibuyaParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Domain(format!("Sibuya gamma = {gamma} must lie in (0, 1]")));
        }
        Ok(SibuyaParams { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `P(Z = n) = gamma (1 - gamma) ... (n - 1 - gamma) / n!`.
    pub fn pmf(&self, n: u64) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let mut p = self.gamma;
        for k in 1..n {
            p *= (k as f64 - self.gamma) / (k + 1) as f64;
        }
        p
    }

    /// `P(Z > n) = Gamma(n + 1 - gamma) / (Gamma(1 - gamma) n!)`.
    pub fn survival(&self, n: u64) -> f64 {
        if n == 0 {
            return 1.0;
        }
        if self.gamma == 1.0 {
            return 0.0;
        }
        use statrs::function::gamma::ln_gamma;
        let n = n as f64;
        (ln_gamma(n + 1.0 - self.gamma) - ln_gamma(1.0 - self.gamma) - ln_gamma(n + 1.0)).exp()
    }
}

const SIBUYA_SEQUENTIAL: u64 = 1000;
/// Largest count returned; keeps the binomial sampler inside `i64`.
pub const SIBUYA_MAX: u64 = 1 << 62;

/// Inverse-CDF draw: the ratio recursion `p_{n+1} = p_n (n - gamma) / (n + 1)`
/// for the first terms, then bisection on the closed-form tail. Saturates at
/// [`SIBUYA_MAX`].
pub fn sibuya_sample<R: Rng + ?Sized>(p: &SibuyaParams, rng: &mut R) -> u64 {
    let u: f64 = rng.random();
    let mut pn = p.gamma;
    let mut cdf = pn;
    let mut n = 1u64;
    while u >= cdf {
        if n >= SIBUYA_SEQUENTIAL {
            return sibuya_tail(p, 1.0 - u, n);
        }
        pn *= (n as f64 - p.gamma) / (n + 1) as f64;
        cdf += pn;
        n += 1;
    }
    n
}

/// Smallest `n > lo` with `P(Z > n) <= tail`.
fn sibuya_tail(p: &SibuyaParams, tail: f64, lo: u64) -> u64 {
    let mut lo = lo;
    let mut hi = (2 * lo).min(SIBUYA_MAX);
    while p.survival(hi) > tail {
        if hi == SIBUYA_MAX {
            return SIBUYA_MAX;
        }
        lo = hi;
        hi = (2 * hi).min(SIBUYA_MAX);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if p.survival(mid) > tail {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Samples from the quasi-stationary law `Q_r`: each is the sum of `Z`
/// independent draws from the source ensemble, `Z ~ Sibuya(r / lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QsdSamples {
    pub samples: Vec<Vec<f64>>,
    pub counts: Vec<u64>,
    pub gamma: f64,
    pub source_size: usize,
}

pub fn sample_qsd<R: Rng + ?Sized>(
    source: &ParticleEnsemble,
    spec: &QsdSpec,
    count: usize,
    rng: &mut R,
) -> Result<QsdSamples> {
    if source.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if count == 0 {
        return Err(Error::Domain("count must be at least 1".into()));
    }
    let params = SibuyaParams::new(spec.gamma().min(1.0))?;
    let size = source.len();
    let dim = source.terminal_states[0].len();
    let mut samples = Vec::with_capacity(count);
    let mut counts = Vec::with_capacity(count);
    for _ in 0..count {
        let z = sibuya_sample(&params, rng);
        let mut acc = vec![0.0; dim];
        let mut add = |j: usize, times: f64| {
            for (a, x) in acc.iter_mut().zip(&source.terminal_states[j]) {
                *a += times * x;
            }
        };
        if z <= size as u64 {
            for _ in 0..z {
                add(rng.random_range(0..size), 1.0);
            }
        } else {
            // multinomial allocation of z draws over the source by conditional binomials
            let mut remaining = z;
            for j in 0..size {
                if remaining == 0 {
                    break;
                }
                let k = if j + 1 == size {
                    remaining
                } else {
                    Binomial::new(remaining, 1.0 / (size - j) as f64)
                        .expect("valid binomial")
                        .sample(rng)
                };
                add(j, k as f64);
                remaining -= k;
            }
        }
        samples.push(acc);
        counts.push(z);
    }
    Ok(QsdSamples {
        samples,
        counts,
        gamma: params.gamma(),
        source_size: size,
    })
}

/// Empirical Laplace functional of compounded samples. The standard error
/// adds the source-ensemble variability, propagated through
/// `L -> 1 - (1 - L)^gamma` by the delta method, to the resampling error.
pub fn qsd_empirical_laplace(source: &ParticleEnsemble, qsd: &QsdSamples, f: &FnVec) -> Result<Estimate> {
    let resampled = Estimate::from_samples(qsd.samples.iter().map(|x| (-f.integrate(x)).exp()))?;
    let src = empirical_laplace(source, f)?;
    let slope = if src.mean < 1.0 {
        qsd.gamma * (1.0 - src.mean).powf(qsd.gamma - 1.0)
    } else {
        0.0
    };
    let source_se = slope * src.se;
    Ok(Estimate {
        mean: resampled.mean,
        se: (resampled.se.powi(2) + source_se.powi(2)).sqrt(),
        count: resampled.count,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub n_paths: usize,
    pub t_end: f64,
    pub dt: f64,
    pub survival: Estimate,
    pub mean_mass: Estimate,
    pub dt_warnings: usize,
    pub seeds: SeedRecord,
}

pub fn summarize(ensemble: &ParticleEnsemble, cfg: &PathConfig) -> Result<EnsembleSummary> {
    Ok(EnsembleSummary {
        n_paths: ensemble.len(),
        t_end: cfg.t_end,
        dt: cfg.dt,
        survival: ensemble.survival_fraction()?,
        mean_mass: ensemble.mean_mass()?,
        dt_warnings: ensemble.dt_warnings,
        seeds: ensemble.per_path_seed.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BranchingMechanism, RateMatrix, StateSpace};
    use crate::spectral::principal_triple;

    fn deterministic(beta: f64) -> SuperprocessModel {
        SuperprocessModel::new(
            StateSpace::anonymous(1),
            RateMatrix::zeros(1),
            BranchingMechanism {
                beta: vec![beta],
                sigma: vec![0.0],
                pi: vec![vec![]],
            },
        )
    }

    #[test]
    fn frozen_dynamics_stay_constant() {
        let m = deterministic(0.0);
        let mu = MeasureVec::new(vec![1.7]).unwrap();
        let out = simulate_path(&m, &mu, &PathConfig::new(1e-2, 1.0, 1, 1), 0).unwrap();
        assert_eq!(out.terminal, vec![1.7]);
    }

    #[test]
    fn linear_decay_within_step_error() {
        let m = deterministic(-1.0);
        let mu = MeasureVec::new(vec![1.0]).unwrap();
        let dt = 1e-3;
        let out = simulate_path(&m, &mu, &PathConfig::new(dt, 1.0, 1, 1), 0).unwrap();
        assert!((out.terminal[0] - (-1f64).exp()).abs() < dt);
        assert!(!out.dt_warning);
    }

    #[test]
    fn large_step_is_flagged() {
        let m = deterministic(-1.6);
        let mu = MeasureVec::new(vec![1.0]).unwrap();
        let out = simulate_path(&m, &mu, &PathConfig::new(0.5, 1.0, 1, 1), 0).unwrap();
        assert!(out.dt_warning);
    }

    #[test]
    fn ensembles_are_reproducible_across_pools() {
        let m = SuperprocessModel::feller(1.0, 1.0);
        let mu = MeasureVec::new(vec![1.0]).unwrap();
        let cfg = PathConfig::new(1e-2, 1.0, 7, 64);
        let a = simulate_ensemble(&m, &mu, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| simulate_ensemble(&m, &mu, &cfg)).unwrap();
        assert_eq!(a, b);
        let single = simulate_path(&m, &mu, &cfg, 5).unwrap();
        assert_eq!(single.terminal, a.terminal_states[5]);
    }

    #[test]
    fn survived_flags_follow_mass() {
        let m = SuperprocessModel::feller(1.0, 1.0);
        let mu = MeasureVec::new(vec![0.2]).unwrap();
        let e = simulate_ensemble(&m, &mu, &PathConfig::new(1e-2, 2.0, 3, 500)).unwrap();
        for (x, s) in e.terminal_states.iter().zip(&e.survived) {
            assert_eq!(*s, total(x) > 0.0);
        }
        let alive = e.survivors();
        assert!(alive.survived.iter().all(|&s| s) && alive.len() < e.len());
    }

    #[test]
    fn laplace_of_zero_is_one() {
        let m = SuperprocessModel::feller(1.0, 1.0);
        let mu = MeasureVec::new(vec![1.0]).unwrap();
        let e = simulate_ensemble(&m, &mu, &PathConfig::new(1e-2, 1.0, 3, 50)).unwrap();
        let est = empirical_laplace(&e, &FnVec::zeros(1)).unwrap();
        assert_eq!((est.mean, est.se), (1.0, 0.0));
        let empty = e.survivors().survivors();
        let none = ParticleEnsemble { terminal_states: vec![], survived: vec![], path_index: vec![], ..empty };
        assert_eq!(empirical_laplace(&none, &FnVec::zeros(1)), Err(Error::EmptyEnsemble));
    }

    #[test]
    fn conditioning_preconditions() {
        let m = SuperprocessModel::feller(1.0, 1.0);
        let t = principal_triple(&m).unwrap();
        let opts = SolverOptions::default();
        let zero = MeasureVec::new(vec![0.0]).unwrap();
        assert!(conditioned_ensemble(&m, &t, &zero, &PathConfig::new(1e-2, 1.0, 1, 1000), &opts).is_err());
        let one = MeasureVec::new(vec![1.0]).unwrap();
        let err = conditioned_ensemble(&m, &t, &one, &PathConfig::new(1e-2, 8.0, 1, 1000), &opts).unwrap_err();
        assert!(matches!(err, Error::Conditioning(_)));
        let c = conditioned_ensemble(&m, &t, &one, &PathConfig::new(1e-3, 1e-3, 1, 2000), &opts).unwrap();
        assert!(c.survival.mean > 0.99 && c.expected_survival > 0.99);
    }

    #[test]
    fn sibuya_pmf_examples() {
        let half = SibuyaParams::new(0.5).unwrap();
        assert_eq!(half.pmf(1), 0.5);
        assert_eq!(half.pmf(2), 0.125);
        assert!((half.survival(2) - (1.0 - 0.625)).abs() < 1e-14);
        assert!(SibuyaParams::new(0.0).is_err() && SibuyaParams::new(1.1).is_err());
        let one = SibuyaParams::new(1.0).unwrap();
        let mut rng = path_rng(1, 0);
        assert!((0..1000).all(|_| sibuya_sample(&one, &mut rng) == 1));
    }

    #[test]
    fn sibuya_tail_agrees_with_recursion() {
        let p = SibuyaParams::new(0.3).unwrap();
        let mut s = 1.0;
        for n in 1..=1500u64 {
            s -= p.pmf(n);
            if n % 100 == 0 {
                assert!((p.survival(n) / s - 1.0).abs() < 1e-9, "n = {n}");
            }
        }
        let n = sibuya_tail(&p, p.survival(123_456), 1000);
        assert_eq!(n, 123_456);
    }

    #[test]
    fn sample_qsd_preconditions_and_gamma_one() {
        let m = SuperprocessModel::feller(1.0, 1.0);
        let mu = MeasureVec::new(vec![1.0]).unwrap();
        let src = simulate_ensemble(&m, &mu, &PathConfig::new(1e-2, 1.0, 9, 200)).unwrap().survivors();
        let spec = QsdSpec::yaglom(-1.0).unwrap();
        let mut rng = path_rng(2, 0);
        assert!(sample_qsd(&src, &spec, 0, &mut rng).is_err());
        let out = sample_qsd(&src, &spec, 100, &mut rng).unwrap();
        assert!(out.counts.iter().all(|&z| z == 1));
        for s in &out.samples {
            assert!(src.terminal_states.contains(s));
        }
    }

    #[test]
    fn large_counts_use_multinomial_allocation() {
        let src = ParticleEnsemble {
            path_index: vec![0, 1],
            terminal_states: vec![vec![1.0], vec![3.0]],
            survived: vec![true, true],
            per_path_seed: SeedRecord::new(0),
            dt_warnings: 0,
        };
        let spec = QsdSpec::new(-0.05, -1.0).unwrap();
        let mut rng = path_rng(4, 0);
        let out = sample_qsd(&src, &spec, 400, &mut rng).unwrap();
        for (x, &z) in out.samples.iter().zip(&out.counts) {
            // each sample is k * 1 + (z - k) * 3 for some k
            let k = (3.0 * z as f64 - x[0]) / 2.0;
            assert!(k >= 0.0 && k <= z as f64 && (k - k.round()).abs() < 1e-6 * z as f64);
        }
        assert!(out.counts.iter().any(|&z| z > 2));
    }

    #[test]
    fn csv_export() {
        let m = SuperprocessModel::feller(1.0, 1.0);
        let mu = MeasureVec::new(vec![1.0]).unwrap();
        let e = simulate_ensemble(&m, &mu, &PathConfig::new(1e-2, 0.1, 3, 3)).unwrap();
        let csv = e.to_csv(&m.space.labels);
        assert!(csv.starts_with("path_index,survived,X[x]\n0,1,"));
        assert_eq!(csv.lines().count(), 4);
    }
}
