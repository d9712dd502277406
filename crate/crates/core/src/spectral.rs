//! Mean semigroup `P_t = exp(t (Q + diag beta))` and its Perron eigentriple.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{expm, generator, is_irreducible};
use crate::model::{FnVec, MeasureVec, SuperprocessModel};

/// Principal eigenvalue with right eigenfunction `phi` and left eigenmeasure
/// `nu`, normalized so that `nu` is a probability vector and `nu(phi) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralTriple {
    pub lambda: f64,
    pub phi: Vec<f64>,
    pub nu: Vec<f64>,
    /// Distance from `lambda` to the real part of the next eigenvalue;
    /// infinite on a single site.
    #[serde(serialize_with = "crate::report::finite_or_null")]
    pub gap: f64,
}

impl SpectralTriple {
    /// `nu(f)`, with `0 * inf = 0`.
    pub fn nu_of(&self, f: &[f64]) -> f64 {
        FnVec(f.to_vec()).integrate(&self.nu)
    }

    /// Rate at which conditioned quantities approach their limits:
    /// the smaller of the spectral gap and `|lambda|`.
    pub fn relaxation_rate(&self) -> f64 {
        self.gap.min(self.lambda.abs())
    }
}

/// Residuals of the two eigen relations in the sup norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenResiduals {
    pub right: f64,
    pub left: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct H1Diagnostic {
    pub t: f64,
    pub value: f64,
}

/// `exp(t (Q + diag beta))`, clipped to be entrywise non-negative.
pub fn mean_semigroup(m: &SuperprocessModel, t: f64) -> Result<DMatrix<f64>> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("time t = {t} must be finite and >= 0")));
    }
    let a = generator(m) * t;
    let mut p = expm(&a);
    p.iter_mut().for_each(|x| *x = x.max(0.0));
    Ok(p)
}

pub fn principal_triple(m: &SuperprocessModel) -> Result<SpectralTriple> {
    let a = generator(m);
    let n = a.nrows();
    if n == 1 {
        return Ok(SpectralTriple {
            lambda: a[(0, 0)],
            phi: vec![1.0],
            nu: vec![1.0],
            gap: f64::INFINITY,
        });
    }
    if !is_irreducible(&a) {
        return Err(Error::Reducible);
    }

    // Normalized repeated squaring of exp(hA) converges to the rank-one
    // projector phi nu^T since every other mode decays relative to lambda.
    let scale = a.amax().max(1e-300);
    let mut b = expm(&(&a * (1.0 / scale)));
    b /= b.amax();
    for _ in 0..200 {
        let mut next = &b * &b;
        let top = next.amax();
        if !(top.is_finite() && top > 0.0) {
            return Err(Error::NoPerronRoot("squaring underflow".into()));
        }
        next /= top;
        let change = (&next - &b).amax();
        b = next;
        if change < 1e-15 {
            break;
        }
    }
    let (mut jc, mut ir) = (0, 0);
    for k in 0..n {
        if b.column(k).sum() > b.column(jc).sum() {
            jc = k;
        }
        if b.row(k).sum() > b.row(ir).sum() {
            ir = k;
        }
    }
    let mut phi: DVector<f64> = b.column(jc).into_owned();
    let mut nu: DVector<f64> = b.row(ir).transpose();
    phi /= phi.sum();
    nu /= nu.sum();
    let mut lambda = nu.dot(&(&a * &phi)) / nu.dot(&phi);

    phi = newton_refine(&a, phi, &mut lambda)?;
    let mut lambda_left = lambda;
    nu = newton_refine(&a.transpose(), nu, &mut lambda_left)?;
    if (lambda - lambda_left).abs() > 1e-9 * scale {
        return Err(Error::NoPerronRoot(format!(
            "left and right refinements disagree: {lambda} vs {lambda_left}"
        )));
    }

    nu /= nu.sum();
    let norm = nu.dot(&phi);
    phi /= norm;
    if phi.iter().chain(nu.iter()).any(|&x| !(x > 0.0)) {
        return Err(Error::NoPerronRoot("eigenvectors are not strictly positive".into()));
    }

    let gap = spectral_gap(&a, lambda)?;
    Ok(SpectralTriple {
        lambda,
        phi: phi.iter().cloned().collect(),
        nu: nu.iter().cloned().collect(),
        gap,
    })
}

/// Newton iteration on `(A - lambda) x = 0` with the normalization `1^T x = 1`.
fn newton_refine(a: &DMatrix<f64>, x0: DVector<f64>, lambda: &mut f64) -> Result<DVector<f64>> {
    let n = a.nrows();
    let mut x = x0;
    for _ in 0..8 {
        let r = a * &x - *lambda * &x;
        if r.amax() < 1e-15 * a.amax().max(1.0) {
            break;
        }
        let mut jac = DMatrix::<f64>::zeros(n + 1, n + 1);
        jac.view_mut((0, 0), (n, n))
            .copy_from(&(a - *lambda * DMatrix::<f64>::identity(n, n)));
        for i in 0..n {
            jac[(i, n)] = -x[i];
            jac[(n, i)] = 1.0;
        }
        let mut rhs = DVector::<f64>::zeros(n + 1);
        for i in 0..n {
            rhs[i] = -r[i];
        }
        rhs[n] = 1.0 - x.sum();
        let step = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NoPerronRoot("singular bordered system".into()))?;
        for i in 0..n {
            x[i] += step[i];
        }
        *lambda += step[n];
    }
    Ok(x)
}

fn spectral_gap(a: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    let eig = a.clone().complex_eigenvalues();
    let mut vals: Vec<(f64, f64)> = eig.iter().map(|z| (z.re, z.im)).collect();
    let (idx, dist) = vals
        .iter()
        .enumerate()
        .map(|(i, &(re, im))| (i, ((re - lambda).powi(2) + im * im).sqrt()))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("non-empty spectrum");
    if dist > 1e-6 * a.amax().max(1.0) {
        return Err(Error::NoPerronRoot(format!(
            "refined root {lambda} is not an eigenvalue (distance {dist:e})"
        )));
    }
    vals.remove(idx);
    let next = vals.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
    let gap = lambda - next;
    if !(gap > 0.0) {
        return Err(Error::NoPerronRoot(format!("non-positive gap {gap}")));
    }
    Ok(gap)
}

pub fn eigen_residuals(m: &SuperprocessModel, triple: &SpectralTriple) -> EigenResiduals {
    let a = generator(m);
    let phi = DVector::from_column_slice(&triple.phi);
    let nu = DVector::from_column_slice(&triple.nu);
    EigenResiduals {
        right: (&a * &phi - triple.lambda * &phi).amax(),
        left: (a.transpose() * &nu - triple.lambda * &nu).amax(),
    }
}

pub fn require_subcritical(triple: &SpectralTriple) -> Result<()> {
    if triple.lambda < 0.0 {
        Ok(())
    } else {
        Err(Error::NotSubcritical(triple.lambda))
    }
}

/// `max_{x,y} |P_t(x,y) / (e^{lambda t} phi_x nu_y) - 1|`: on a finite space the
/// supremum over integrable test functions is attained at point masses.
pub fn h1_diagnostic(m: &SuperprocessModel, triple: &SpectralTriple, t: f64) -> Result<H1Diagnostic> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("time t = {t} must be positive")));
    }
    let p = mean_semigroup(m, t)?;
    let growth = (triple.lambda * t).exp();
    let mut value: f64 = 0.0;
    for x in 0..m.n() {
        for y in 0..m.n() {
            let target = growth * triple.phi[x] * triple.nu[y];
            value = value.max((p[(x, y)] / target - 1.0).abs());
        }
    }
    Ok(H1Diagnostic { t, value })
}

/// `mu(P_t f)`.
pub fn first_moment(m: &SuperprocessModel, mu: &MeasureVec, f: &FnVec, t: f64) -> Result<f64> {
    if !f.is_finite() {
        return Err(Error::Domain("first moment needs a finite test function".into()));
    }
    let p = mean_semigroup(m, t)?;
    let pf = p * DVector::from_column_slice(f.values());
    Ok(mu.weights().iter().zip(pf.iter()).map(|(a, b)| a * b).sum())
}

/// Everything the `spectral` command reports.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub lambda: f64,
    #[serde(serialize_with = "crate::report::finite_or_null")]
    pub gap: f64,
    pub phi: Vec<f64>,
    pub nu: Vec<f64>,
    pub residuals: EigenResiduals,
    pub h1_decay: Vec<H1Diagnostic>,
}

pub fn spectral_report(m: &SuperprocessModel, triple: &SpectralTriple) -> Result<SpectralReport> {
    let rate = if triple.gap.is_finite() {
        triple.gap
    } else {
        triple.lambda.abs().max(1.0)
    };
    let h1_decay = (1..=10)
        .map(|k| h1_diagnostic(m, triple, k as f64 / rate))
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectralReport {
        lambda: triple.lambda,
        gap: triple.gap,
        phi: triple.phi.clone(),
        nu: triple.nu.clone(),
        residuals: eigen_residuals(m, triple),
        h1_decay,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BranchingMechanism, RateMatrix, StateSpace};

    fn two_site(q: [[f64; 2]; 2], beta: [f64; 2]) -> SuperprocessModel {
        SuperprocessModel::new(
            StateSpace::anonymous(2),
            RateMatrix::new(q.iter().map(|r| r.to_vec()).collect()),
            BranchingMechanism {
                beta: beta.to_vec(),
                sigma: vec![1.0, 1.0],
                pi: vec![vec![], vec![]],
            },
        )
    }

    #[test]
    fn semigroup_examples() {
        let m = two_site([[-1.0, 1.0], [1.0, -1.0]], [-1.0, -1.0]);
        let p0 = mean_semigroup(&m, 0.0).unwrap();
        assert_eq!(p0, DMatrix::identity(2, 2));
        let p1 = mean_semigroup(&m, 1.0).unwrap();
        let e = (-1f64).exp();
        assert!((p1[(0, 0)] - e * (1.0 + (-2f64).exp()) / 2.0).abs() < 1e-15);
        let f = SuperprocessModel::feller(1.0, 1.0);
        assert!((mean_semigroup(&f, 1.0).unwrap()[(0, 0)] - e).abs() < 1e-16);
        assert!(mean_semigroup(&f, -1.0).is_err());
    }

    #[test]
    fn triple_examples() {
        let t = principal_triple(&SuperprocessModel::feller(1.0, 1.0)).unwrap();
        assert_eq!((t.lambda, t.phi.clone(), t.nu.clone()), (-1.0, vec![1.0], vec![1.0]));

        let t = principal_triple(&two_site([[-1.0, 1.0], [1.0, -1.0]], [-1.0, -1.0])).unwrap();
        assert!((t.lambda + 1.0).abs() < 1e-13);
        assert!((t.gap - 2.0).abs() < 1e-12);
        for i in 0..2 {
            assert!((t.phi[i] - 1.0).abs() < 1e-13);
            assert!((t.nu[i] - 0.5).abs() < 1e-13);
        }

        let m = two_site([[-2.0, 1.0], [1.0, -1.0]], [0.0, 0.0]);
        let t = principal_triple(&m).unwrap();
        assert!((t.lambda - (-3.0 + 5f64.sqrt()) / 2.0).abs() < 1e-13);
        let r = eigen_residuals(&m, &t);
        assert!(r.right < 1e-12 && r.left < 1e-12);
    }

    #[test]
    fn triple_matches_power_iteration() {
        // plain power iteration on A + cI as an independent route
        let m = two_site([[-2.0, 1.0], [1.0, -1.0]], [0.0, 0.0]);
        let a = generator(&m) + DMatrix::identity(2, 2) * 3.0;
        let mut v = DVector::from_element(2, 1.0);
        for _ in 0..2000 {
            v = &a * &v;
            v /= v.sum();
        }
        let rayleigh = (&a * &v).sum() / v.sum() - 3.0;
        let t = principal_triple(&m).unwrap();
        assert!((rayleigh - t.lambda).abs() < 1e-12);
        let phi_ratio = t.phi[1] / t.phi[0];
        assert!((v[1] / v[0] - phi_ratio).abs() < 1e-12);
    }

    #[test]
    fn reducible_is_rejected() {
        let m = two_site([[-1.0, 1.0], [0.0, -1.0]], [0.0, 0.0]);
        assert_eq!(principal_triple(&m), Err(Error::Reducible));
    }

    #[test]
    fn subcritical_gate() {
        let mk = |lambda| SpectralTriple {
            lambda,
            phi: vec![1.0],
            nu: vec![1.0],
            gap: f64::INFINITY,
        };
        assert!(require_subcritical(&mk(-1.0)).is_ok());
        assert!(require_subcritical(&mk(0.0)).is_err());
        assert!(require_subcritical(&mk(0.5)).is_err());
    }

    #[test]
    fn h1_examples() {
        let f = SuperprocessModel::feller(1.0, 1.0);
        let tf = principal_triple(&f).unwrap();
        assert!(h1_diagnostic(&f, &tf, 3.0).unwrap().value < 1e-15);
        assert!(h1_diagnostic(&f, &tf, 0.0).is_err());

        let m = two_site([[-1.0, 1.0], [1.0, -1.0]], [-1.0, -1.0]);
        let t = principal_triple(&m).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..20 {
            let s = k as f64 * 0.25;
            let v = h1_diagnostic(&m, &t, s).unwrap().value;
            // closed form for the symmetric pair: e^{-2t}
            assert!((v - (-2.0 * s).exp()).abs() < 1e-12);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn first_moment_examples() {
        let f = SuperprocessModel::feller(1.0, 1.0);
        let mu = MeasureVec::new(vec![2.0]).unwrap();
        let v = first_moment(&f, &mu, &FnVec(vec![3.0]), 2f64.ln()).unwrap();
        assert!((v - 3.0).abs() < 1e-14);
        assert_eq!(first_moment(&f, &mu, &FnVec(vec![3.0]), 0.0).unwrap(), 6.0);
        assert!(first_moment(&f, &mu, &FnVec::infinity(1), 1.0).is_err());

        let m = two_site([[-2.0, 1.0], [1.0, -1.0]], [0.0, 0.0]);
        let t = principal_triple(&m).unwrap();
        let nu = MeasureVec::new(t.nu.clone()).unwrap();
        let v = first_moment(&m, &nu, &FnVec(t.phi.clone()), 1.0).unwrap();
        assert!((v - t.lambda.exp()).abs() < 1e-13);
    }
}
