//! Closed forms for the single-site Feller branching diffusion
//! `psi(z) = b z + c z^2`, used as ground truth elsewhere.
//!
//! `u_t(f)` solves `u' = -(b u + c u^2)`, `u_0 = f`. The extinction function is
//! its `f -> inf` limit and the Yaglom limit is Exponential with rate `b / c`.

use crate::error::{Error, Result};
use crate::model::SuperprocessModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FellerParams {
    b: f64,
    c: f64,
}

impl FellerParams {
    pub fn new(b: f64, c: f64) -> Result<Self> {
        if !(b > 0.0 && c > 0.0 && b.is_finite() && c.is_finite()) {
            return Err(Error::Domain(format!("Feller parameters need b, c > 0 (got {b}, {c})")));
        }
        Ok(FellerParams { b, c })
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// Parameters of a model that is a Feller diffusion: one site, no
    /// killing, no jumps, `beta < 0 < sigma`.
    pub fn from_model(m: &SuperprocessModel) -> Option<Self> {
        if m.n() != 1 || m.rates.get(0, 0) != 0.0 || !m.mech.pi[0].is_empty() {
            return None;
        }
        FellerParams::new(-m.mech.beta[0], m.mech.sigma[0].powi(2)).ok()
    }

    /// `lambda = -b`.
    pub fn lambda(&self) -> f64 {
        -self.b
    }
}

fn non_negative(name: &str, x: f64) -> Result<()> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!("{name} = {x} must be non-negative")));
    }
    Ok(())
}

/// `b f e^{-bt} / (b + c f (1 - e^{-bt}))`.
pub fn feller_cumulant(p: FellerParams, f: f64, t: f64) -> Result<f64> {
    non_negative("f", f)?;
    non_negative("t", t)?;
    if t == 0.0 {
        return Ok(f);
    }
    if f.is_infinite() {
        return feller_extinction(p, t);
    }
    let decay = (-p.b * t).exp();
    let growth = -(-p.b * t).exp_m1();
    Ok(p.b * f * decay / (p.b + p.c * f * growth))
}

/// `b e^{-bt} / (c (1 - e^{-bt}))`.
pub fn feller_extinction(p: FellerParams, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("t = {t} must be positive")));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    Ok(p.b * (-p.b * t).exp() / (p.c * -(-p.b * t).exp_m1()))
}

/// `1 - e^{-G f} = c f / (b + c f)`.
pub fn feller_yaglom(p: FellerParams, f: f64) -> Result<f64> {
    non_negative("f", f)?;
    if f.is_infinite() {
        return Ok(1.0);
    }
    Ok(p.c * f / (p.b + p.c * f))
}

/// `1 - e^{-Gamma_t f}` from the closed-form cumulant and extinction function.
pub fn feller_gamma_t(p: FellerParams, f: f64, t: f64) -> Result<f64> {
    let num = -(-feller_cumulant(p, f, t)?).exp_m1();
    let den = -(-feller_extinction(p, t)?).exp_m1();
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> FellerParams {
        FellerParams::new(1.0, 1.0).unwrap()
    }

    #[test]
    fn examples() {
        let p = unit();
        assert_eq!(feller_cumulant(p, 2.5, 0.0).unwrap(), 2.5);
        assert!((feller_cumulant(p, 1.0, 2f64.ln()).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(feller_cumulant(p, 0.0, 1.0).unwrap(), 0.0);
        assert!((feller_extinction(p, 2f64.ln()).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(feller_extinction(p, f64::INFINITY).unwrap(), 0.0);
        assert_eq!(feller_yaglom(p, 0.0).unwrap(), 0.0);
        assert_eq!(feller_yaglom(p, 1.0).unwrap(), 0.5);
        assert_eq!(feller_yaglom(p, f64::INFINITY).unwrap(), 1.0);
        assert!(feller_cumulant(p, -1.0, 1.0).is_err());
        assert!(feller_extinction(p, 0.0).is_err());
        assert!(FellerParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn extinction_is_decreasing_and_is_the_cap_limit() {
        let p = FellerParams::new(0.7, 1.9).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..200 {
            let t = k as f64 * 0.05;
            let v = feller_extinction(p, t).unwrap();
            assert!(v < prev);
            prev = v;
            let u = feller_cumulant(p, 1e12, t).unwrap();
            assert!((u / v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn recognizes_feller_models() {
        let p = FellerParams::from_model(&SuperprocessModel::feller(0.5, 2.0)).unwrap();
        assert!((p.b() - 0.5).abs() < 1e-15 && (p.c() - 2.0).abs() < 1e-15);
        assert!(FellerParams::from_model(&SuperprocessModel::feller(-0.5, 2.0)).is_none());
    }

    #[test]
    fn gamma_t_example() {
        // (1 - e^{-1/3}) / (1 - e^{-1})
        let g = feller_gamma_t(unit(), 1.0, 2f64.ln()).unwrap();
        assert!((g - 0.448_440_863_8).abs() < 1e-9, "{g}");
    }
}
