//! Superprocess model on a finite state space: underlying killed Markov
//! chain plus a site-dependent branching mechanism
//!
//! ```text
//! psi(x, z) = -beta(x) z + sigma(x)^2 z^2 + sum_k (exp(-z u_k) - 1 + z u_k) w_k
//! ```
//!
//! with finitely many jump atoms `(u_k, w_k)` per site.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite set of labelled sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    pub labels: Vec<String>,
}

impl StateSpace {
    pub fn new(labels: Vec<String>) -> Self {
        StateSpace { labels }
    }

    /// Sites named `s0, s1, ...`.
    pub fn anonymous(n: usize) -> Self {
        StateSpace {
            labels: (0..n).map(|i| format!("s{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Sub-Markov generator. The row-sum deficit is the killing rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMatrix {
    rows: Vec<Vec<f64>>,
}

impl RateMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Self {
        RateMatrix { rows }
    }

    pub fn zeros(n: usize) -> Self {
        RateMatrix {
            rows: vec![vec![0.0; n]; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Killing rate at site `i`, i.e. minus the row sum.
    pub fn killing_rate(&self, i: usize) -> f64 {
        -self.rows[i].iter().sum::<f64>()
    }
}

/// A jump atom of the branching measure: mass `u` arriving at rate `w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub u: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchingMechanism {
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub pi: Vec<Vec<Atom>>,
}

impl BranchingMechanism {
    /// Per-site `sum_k min(u_k, u_k^2) w_k`.
    pub fn kernel_mass(&self) -> Vec<f64> {
        self.pi
            .iter()
            .map(|atoms| atoms.iter().map(|a| a.u.min(a.u * a.u) * a.w).sum())
            .collect()
    }

    /// Per-site compensator `sum_k u_k w_k` moved into the drift.
    pub fn compensator(&self) -> Vec<f64> {
        self.pi
            .iter()
            .map(|atoms| atoms.iter().map(|a| a.u * a.w).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperprocessModel {
    pub space: StateSpace,
    pub rates: RateMatrix,
    pub mech: BranchingMechanism,
}

/// One violated model invariant. `field` names the config key it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Per-site `sum_k min(u, u^2) w`, always finite for atomic jump measures.
    pub kernel_mass: Vec<f64>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        match self.violations.first() {
            None => Ok(()),
            Some(v) => Err(Error::Validation(format!("{}: {}", v.field, v.message))),
        }
    }
}

impl SuperprocessModel {
    pub fn new(space: StateSpace, rates: RateMatrix, mech: BranchingMechanism) -> Self {
        SuperprocessModel { space, rates, mech }
    }

    /// Single-site Feller branching diffusion with `psi(z) = b z + c z^2`.
    pub fn feller(b: f64, c: f64) -> Self {
        SuperprocessModel {
            space: StateSpace::new(vec!["x".into()]),
            rates: RateMatrix::zeros(1),
            mech: BranchingMechanism {
                beta: vec![-b],
                sigma: vec![c.sqrt()],
                pi: vec![Vec::new()],
            },
        }
    }

    pub fn n(&self) -> usize {
        self.space.len()
    }

    /// Checks every model invariant without mutating anything.
    pub fn validate(&self) -> ValidationReport {
        let mut out = Vec::new();
        let mut bad = |field: &'static str, message: String| out.push(Violation { field, message });
        let n = self.space.len();
        if n == 0 {
            bad("states", "state space must have at least one site".into());
        }
        for (i, a) in self.space.labels.iter().enumerate() {
            if self.space.labels[..i].contains(a) {
                bad("states", format!("duplicate site label {a:?}"));
            }
        }
        if self.rates.dim() != n || self.rates.rows.iter().any(|r| r.len() != n) {
            bad("rates", format!("rate matrix must be {n}x{n}"));
        } else {
            for (i, row) in self.rates.rows.iter().enumerate() {
                for (j, &q) in row.iter().enumerate() {
                    if !q.is_finite() {
                        bad("rates", format!("rate ({i},{j}) is not finite"));
                    } else if i != j && q < 0.0 {
                        bad("rates", format!("off-diagonal rate ({i},{j}) = {q} is negative"));
                    } else if i == j && q > 0.0 {
                        bad("rates", format!("diagonal rate ({i},{i}) = {q} is positive"));
                    }
                }
                let s: f64 = row.iter().sum();
                if s > 1e-12 * row.iter().map(|q| q.abs()).sum::<f64>().max(1.0) {
                    bad("rates", format!("row {i} sum {s} > 0 violates the sub-Markov rule"));
                }
            }
        }
        if self.mech.beta.len() != n {
            bad("beta", format!("beta must have {n} entries"));
        }
        for (i, b) in self.mech.beta.iter().enumerate() {
            if !b.is_finite() {
                bad("beta", format!("beta[{i}] is not finite"));
            }
        }
        if self.mech.sigma.len() != n {
            bad("sigma", format!("sigma must have {n} entries"));
        }
        for (i, &s) in self.mech.sigma.iter().enumerate() {
            if !(s.is_finite() && s >= 0.0) {
                bad("sigma", format!("sigma[{i}] = {s} must be finite and non-negative"));
            }
        }
        if self.mech.pi.len() != n {
            bad("pi", format!("pi must list atoms for {n} sites"));
        }
        for (i, atoms) in self.mech.pi.iter().enumerate() {
            for (k, a) in atoms.iter().enumerate() {
                if !(a.u.is_finite() && a.u > 0.0) {
                    bad("pi", format!("site {i} atom {k}: atom mass must be positive, got {}", a.u));
                }
                if !(a.w.is_finite() && a.w > 0.0) {
                    bad("pi", format!("site {i} atom {k}: atom rate must be positive, got {}", a.w));
                }
            }
        }
        ValidationReport {
            violations: out,
            kernel_mass: self.mech.kernel_mass(),
        }
    }
}

/// Non-negative function on the sites, `+inf` allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnVec(pub Vec<f64>);

impl FnVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Domain("function values must be in [0, inf]".into()));
        }
        Ok(FnVec(values))
    }

    pub fn constant(n: usize, c: f64) -> Self {
        FnVec(vec![c; n])
    }

    pub fn zeros(n: usize) -> Self {
        FnVec(vec![0.0; n])
    }

    /// The point `inf * 1_E`.
    pub fn infinity(n: usize) -> Self {
        FnVec(vec![f64::INFINITY; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// `min(f, cap)` entrywise.
    pub fn capped(&self, cap: f64) -> FnVec {
        FnVec(self.0.iter().map(|&v| v.min(cap)).collect())
    }

    /// `u * f` with `0 * inf = 0`.
    pub fn scaled(&self, u: f64) -> FnVec {
        FnVec(self.0.iter().map(|&v| mul_ext(u, v)).collect())
    }

    /// Integral against a measure, with `0 * inf = 0`.
    pub fn integrate(&self, weights: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(weights)
            .map(|(&f, &w)| mul_ext(w, f))
            .sum()
    }
}

/// Product on `[0, inf]` with `0 * inf = 0`.
pub fn mul_ext(a: f64, b: f64) -> f64 {
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        a * b
    }
}

/// Finite measure on the sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureVec(pub Vec<f64>);

impl MeasureVec {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain("measure weights must be finite and non-negative".into()));
        }
        Ok(MeasureVec(weights))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `exp(-x) - 1 + x` without cancellation for small `x`.
pub(crate) fn compensated_exp(x: f64) -> f64 {
    if x < 1e-3 {
        let x2 = x * x;
        x2 * (0.5 - x / 6.0 + x2 / 24.0 - x2 * x / 120.0)
    } else {
        (-x).exp_m1() + x
    }
}

fn check_site(m: &SuperprocessModel, site: usize) -> Result<()> {
    if site >= m.n() {
        return Err(Error::Domain(format!("site {site} out of range")));
    }
    Ok(())
}

fn check_z(z: f64) -> Result<()> {
    if z.is_nan() || z < 0.0 {
        return Err(Error::Domain(format!("z = {z} must be non-negative")));
    }
    Ok(())
}

/// Branching mechanism `psi(x, z)` for finite `z >= 0`.
pub fn psi_eval(m: &SuperprocessModel, site: usize, z: f64) -> Result<f64> {
    check_site(m, site)?;
    check_z(z)?;
    if z.is_infinite() {
        return Err(Error::Domain("psi is evaluated at finite z only".into()));
    }
    Ok(-m.mech.beta[site] * z + psi0(m, site, z))
}

/// `psi_0(x, z) = psi(x, z) + beta(x) z`; at `z = inf` returns the monotone limit.
pub fn psi0_eval(m: &SuperprocessModel, site: usize, z: f64) -> Result<f64> {
    check_site(m, site)?;
    check_z(z)?;
    Ok(psi0(m, site, z))
}

/// `d psi_0 / dz`; at `z = inf` returns the monotone limit.
pub fn psi0_prime_eval(m: &SuperprocessModel, site: usize, z: f64) -> Result<f64> {
    check_site(m, site)?;
    check_z(z)?;
    Ok(psi0_prime(m, site, z))
}

pub(crate) fn psi0(m: &SuperprocessModel, site: usize, z: f64) -> f64 {
    let s2 = m.mech.sigma[site] * m.mech.sigma[site];
    let atoms = &m.mech.pi[site];
    if z.is_infinite() {
        return if s2 > 0.0 || !atoms.is_empty() {
            f64::INFINITY
        } else {
            0.0
        };
    }
    s2 * z * z
        + atoms
            .iter()
            .map(|a| compensated_exp(z * a.u) * a.w)
            .sum::<f64>()
}

pub(crate) fn psi0_prime(m: &SuperprocessModel, site: usize, z: f64) -> f64 {
    let s2 = m.mech.sigma[site] * m.mech.sigma[site];
    let atoms = &m.mech.pi[site];
    if z.is_infinite() {
        return if s2 > 0.0 {
            f64::INFINITY
        } else {
            atoms.iter().map(|a| a.u * a.w).sum()
        };
    }
    2.0 * s2 * z
        + atoms
            .iter()
            .map(|a| -(-z * a.u).exp_m1() * a.u * a.w)
            .sum::<f64>()
}

/// Outcome of the spatially uniform lower-envelope extinction test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GreyVerdict {
    HoldsSufficiently,
    Inconclusive,
}

/// Site-independent envelope `psi_env <= psi(x, .)` for every site.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Envelope {
    pub beta: f64,
    pub sigma: f64,
    pub atoms: Vec<Atom>,
}

impl Envelope {
    pub fn of(m: &SuperprocessModel) -> Self {
        let beta = m.mech.beta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sigma = m.mech.sigma.iter().cloned().fold(f64::INFINITY, f64::min);
        // atoms whose mass appears at every site, with the smallest total rate
        let mut atoms = Vec::new();
        if let Some(first) = m.mech.pi.first() {
            let mut masses: Vec<f64> = first.iter().map(|a| a.u).collect();
            masses.sort_by(f64::total_cmp);
            masses.dedup();
            for u in masses {
                let per_site: Option<Vec<f64>> = m
                    .mech
                    .pi
                    .iter()
                    .map(|site| {
                        let w: f64 = site.iter().filter(|a| a.u == u).map(|a| a.w).sum();
                        (w > 0.0).then_some(w)
                    })
                    .collect();
                if let Some(ws) = per_site {
                    let w = ws.into_iter().fold(f64::INFINITY, f64::min);
                    atoms.push(Atom { u, w });
                }
            }
        }
        Envelope { beta, sigma, atoms }
    }

    pub fn eval(&self, z: f64) -> f64 {
        -self.beta * z
            + self.sigma * self.sigma * z * z
            + self
                .atoms
                .iter()
                .map(|a| compensated_exp(z * a.u) * a.w)
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreyReport {
    pub verdict: GreyVerdict,
    pub envelope: Envelope,
    /// `(Z, int_{z0}^{Z} dz / psi_env)` for the numerical path.
    pub partial_integrals: Vec<(f64, f64)>,
}

/// Sufficient check for finite-time extinction via a uniform lower envelope
/// whose reciprocal is integrable at infinity.
pub fn grey_condition_check(m: &SuperprocessModel) -> GreyReport {
    let envelope = Envelope::of(m);
    if envelope.sigma > 0.0 {
        return GreyReport {
            verdict: GreyVerdict::HoldsSufficiently,
            envelope,
            partial_integrals: Vec::new(),
        };
    }
    // integrate 1/psi_env on [z0, 10^k] in log coordinates
    let mut z0 = 1.0;
    while envelope.eval(z0) <= 0.0 && z0 < 1e12 {
        z0 *= 2.0;
    }
    let mut partial_integrals = Vec::new();
    if envelope.eval(z0) <= 0.0 {
        return GreyReport {
            verdict: GreyVerdict::Inconclusive,
            envelope,
            partial_integrals,
        };
    }
    let integrand = |s: f64| {
        let z = s.exp();
        z / envelope.eval(z)
    };
    let mut total = 0.0;
    let mut lo = z0.ln();
    let mut increments = Vec::new();
    for k in 1..=12 {
        let hi = (z0 * 10f64.powi(k)).ln();
        let piece = simpson(&integrand, lo, hi, 64);
        total += piece;
        increments.push(piece);
        partial_integrals.push((hi.exp(), total));
        lo = hi;
    }
    let last = increments[increments.len() - 1];
    let prev = increments[increments.len() - 2];
    let converging = last < 1e-6 * total.max(1e-300) && last < 0.5 * prev;
    GreyReport {
        verdict: if converging {
            GreyVerdict::HoldsSufficiently
        } else {
            GreyVerdict::Inconclusive
        },
        envelope,
        partial_integrals,
    }
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels * 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_site(rates: Vec<Vec<f64>>) -> SuperprocessModel {
        SuperprocessModel::new(
            StateSpace::anonymous(2),
            RateMatrix::new(rates),
            BranchingMechanism {
                beta: vec![-1.0, -1.0],
                sigma: vec![1.0, 1.0],
                pi: vec![vec![], vec![]],
            },
        )
    }

    fn one_atom() -> SuperprocessModel {
        SuperprocessModel::new(
            StateSpace::anonymous(1),
            RateMatrix::zeros(1),
            BranchingMechanism {
                beta: vec![0.0],
                sigma: vec![0.0],
                pi: vec![vec![Atom { u: 1.0, w: 1.0 }]],
            },
        )
    }

    #[test]
    fn validation_examples() {
        assert!(SuperprocessModel::feller(1.0, 1.0).validate().passed());
        let r = two_site(vec![vec![-1.0, 2.0], vec![1.0, -1.0]]).validate();
        assert!(!r.passed());
        assert!(r.violations[0].message.contains("row 0 sum"));
        let mut m = one_atom();
        m.mech.pi[0][0].u = 0.0;
        let r = m.validate();
        assert!(r.violations[0].message.contains("atom mass must be positive"));
    }

    #[test]
    fn validation_catches_shape_and_labels() {
        let mut m = two_site(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]);
        m.space.labels[1] = "s0".into();
        m.mech.sigma.pop();
        let fields: Vec<_> = m.validate().violations.iter().map(|v| v.field).collect();
        assert_eq!(fields, vec!["states", "sigma"]);
    }

    #[test]
    fn psi_examples() {
        let m = SuperprocessModel::feller(1.0, 1.0);
        assert_eq!(psi_eval(&m, 0, 2.0).unwrap(), 6.0);
        assert_eq!(psi_eval(&m, 0, 0.0).unwrap(), 0.0);
        let a = one_atom();
        assert!((psi_eval(&a, 0, 1.0).unwrap() - (-1f64).exp()).abs() < 1e-15);
        assert!(psi_eval(&m, 0, -1.0).is_err());
    }

    #[test]
    fn psi0_examples() {
        let m = SuperprocessModel::feller(1.0, 1.0);
        assert_eq!(psi0_eval(&m, 0, 3.0).unwrap(), 9.0);
        assert_eq!(psi0_prime_eval(&m, 0, 3.0).unwrap(), 6.0);
        assert_eq!(psi0_eval(&m, 0, 0.0).unwrap(), 0.0);
        assert_eq!(psi0_prime_eval(&m, 0, 0.0).unwrap(), 0.0);
        let mut flat = m.clone();
        flat.mech.sigma[0] = 0.0;
        assert_eq!(psi0_eval(&flat, 0, f64::INFINITY).unwrap(), 0.0);
        assert_eq!(psi0_eval(&m, 0, f64::INFINITY).unwrap(), f64::INFINITY);
        assert_eq!(psi0_prime_eval(&one_atom(), 0, f64::INFINITY).unwrap(), 1.0);
    }

    #[test]
    fn psi0_grid_properties() {
        let mut m = one_atom();
        m.mech.sigma[0] = 0.4;
        m.mech.beta[0] = -0.7;
        m.mech.pi[0].push(Atom { u: 0.05, w: 3.0 });
        let h = 1e-4;
        let mut prev = (0.0, 0.0);
        for i in 0..400 {
            let z = i as f64 * 0.05;
            let p = psi0(&m, 0, z);
            let dp = psi0_prime(&m, 0, z);
            assert!(p <= z * dp + 1e-14, "z = {z}");
            assert!((psi_eval(&m, 0, z).unwrap() - (p - m.mech.beta[0] * z)).abs() < 1e-12);
            assert!(p >= prev.0 && dp >= prev.1);
            prev = (p, dp);
            if i > 0 {
                let fd = (psi0(&m, 0, z + h) - psi0(&m, 0, z - h)) / (2.0 * h);
                assert!((fd - dp).abs() < 1e-6 * (1.0 + dp), "z = {z}: {fd} vs {dp}");
            }
        }
    }

    #[test]
    fn compensated_exp_matches_direct_away_from_zero() {
        for &x in &[1e-3, 0.01, 0.5, 3.0, 40.0] {
            let direct = (-x as f64).exp() - 1.0 + x;
            assert!((compensated_exp(x) - direct).abs() < 1e-12 * (1.0 + direct));
        }
        assert!((compensated_exp(1e-9) / 5e-19 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn grey_examples() {
        let m = two_site(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]);
        assert_eq!(grey_condition_check(&m).verdict, GreyVerdict::HoldsSufficiently);
        let mut flat = m.clone();
        flat.mech.sigma = vec![0.0, 0.0];
        assert_eq!(grey_condition_check(&flat).verdict, GreyVerdict::Inconclusive);
        let mut mixed = m;
        mixed.mech.sigma = vec![1.0, 0.0];
        let r = grey_condition_check(&mixed);
        assert_eq!(r.verdict, GreyVerdict::Inconclusive);
        assert_eq!(r.envelope.sigma, 0.0);
    }

    #[test]
    fn envelope_keeps_shared_atoms_only() {
        let mut m = two_site(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]);
        m.mech.pi = vec![
            vec![Atom { u: 1.0, w: 2.0 }, Atom { u: 0.5, w: 1.0 }],
            vec![Atom { u: 1.0, w: 0.5 }],
        ];
        m.mech.beta = vec![-2.0, -0.5];
        let e = Envelope::of(&m);
        assert_eq!(e.atoms, vec![Atom { u: 1.0, w: 0.5 }]);
        assert_eq!(e.beta, -0.5);
        for i in 0..50 {
            let z = i as f64 * 0.3;
            for x in 0..2 {
                assert!(e.eval(z) <= psi_eval(&m, x, z).unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn infinity_conventions() {
        let f = FnVec(vec![f64::INFINITY, 2.0]);
        assert_eq!(f.scaled(0.0).values(), &[0.0, 0.0]);
        assert_eq!(f.integrate(&[0.0, 1.0]), 2.0);
        assert_eq!(f.capped(16.0).values(), &[16.0, 2.0]);
        assert!(FnVec::new(vec![-1.0]).is_err());
        assert!(MeasureVec::new(vec![f64::INFINITY]).is_err());
    }
}
