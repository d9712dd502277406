//! Dense matrix helpers: the mean generator and its exponential.

use nalgebra::{DMatrix, DVector};

use crate::model::SuperprocessModel;

/// `Q + diag(beta)`.
pub fn generator(m: &SuperprocessModel) -> DMatrix<f64> {
    let n = m.n();
    DMatrix::from_fn(n, n, |i, j| {
        m.rates.get(i, j) + if i == j { m.mech.beta[i] } else { 0.0 }
    })
}

/// Strong connectivity of the off-diagonal support.
pub fn is_irreducible(a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let e = if forward { a[(i, j)] } else { a[(j, i)] };
                if i != j && e > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    n > 0 && reach(true) && reach(false)
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring with a degree-13 Padé approximant.
pub fn expm_pade(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let norm = a.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max);
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a / 2f64.powi(s);
    let b = &PADE13;
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (b[13] * &a6 + b[11] * &a4 + b[9] * &a2)
        + b[7] * &a6
        + b[5] * &a4
        + b[3] * &a2
        + b[1] * &ident;
    let u = &a * u_inner;
    let v = &a6 * (b[12] * &a6 + b[10] * &a4 + b[8] * &a2)
        + b[6] * &a6
        + b[4] * &a4
        + b[2] * &a2
        + b[0] * &ident;
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .expect("Padé denominator is nonsingular after scaling");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Exponential of a symmetric matrix through its eigendecomposition.
pub fn expm_symmetric(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.exp()));
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

pub fn is_symmetric(a: &DMatrix<f64>) -> bool {
    let scale = a.amax().max(1.0);
    a.nrows() == a.ncols() && (a - a.transpose()).amax() <= 1e-14 * scale
}

/// `exp(a)`, taking the eigendecomposition route for symmetric input.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    if is_symmetric(a) {
        expm_symmetric(a)
    } else {
        expm_pade(a)
    }
}

pub fn sup_norm_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taylor_reference(a: &DMatrix<f64>) -> DMatrix<f64> {
        // plain Taylor series after heavy scaling, independent of the Padé path
        let n = a.nrows();
        let s = 8;
        let a = a / 2f64.powi(s);
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..30 {
            term = &term * &a / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn two_site_closed_form() {
        let a = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 1.0, -2.0]);
        let e = (-1f64).exp();
        let diag = e * (1.0 + (-2f64).exp()) / 2.0;
        let off = e * (1.0 - (-2f64).exp()) / 2.0;
        for p in [expm_pade(&a), expm_symmetric(&a)] {
            assert!((p[(0, 0)] - diag).abs() < 1e-15);
            assert!((p[(0, 1)] - off).abs() < 1e-15);
        }
    }

    #[test]
    fn pade_matches_taylor_and_symmetric_path() {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[-3.1, 1.2, 0.4, 0.3, -1.9, 1.1, 2.0, 0.5, -4.2],
        );
        for t in [0.01, 0.7, 3.0, 12.0] {
            let at = &a * t;
            let p = expm_pade(&at);
            let r = taylor_reference(&at);
            assert!(sup_norm_diff(&p, &r) < 1e-11 * r.amax());
        }
        let s = &a + a.transpose();
        assert!(sup_norm_diff(&expm_pade(&s), &expm_symmetric(&s)) < 1e-12);
    }

    #[test]
    fn irreducibility() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]);
        assert!(!is_irreducible(&a));
        let b = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.5, -1.0]);
        assert!(is_irreducible(&b));
        assert!(is_irreducible(&DMatrix::from_element(1, 1, -1.0)));
    }
}
