use proptest::prelude::*;
use superproc::cumulant::{semigroup_residual, solve_cumulant_at, SolverOptions};
use superproc::model::{
    psi0_eval, psi0_prime_eval, psi_eval, Atom, BranchingMechanism, FnVec, RateMatrix, StateSpace, SuperprocessModel,
};
use superproc::oracle::{feller_cumulant, FellerParams};
use superproc::qsd::{qsd_transform, yaglom_transform, QsdSpec};
use superproc::spectral::{mean_semigroup, principal_triple};

fn two_site() -> impl Strategy<Value = SuperprocessModel> {
    (
        0.1f64..2.0,
        0.1f64..2.0,
        0.0f64..0.5,
        prop::array::uniform2(-2.0f64..-0.2),
        prop::array::uniform2(0.2f64..1.2),
        0.1f64..2.0,
        0.0f64..1.0,
    )
        .prop_map(|(q01, q10, kill, beta, sigma, u, w)| {
            let pi = if w > 0.05 {
                vec![vec![Atom { u, w }], Vec::new()]
            } else {
                vec![Vec::new(), Vec::new()]
            };
            SuperprocessModel::new(
                StateSpace::anonymous(2),
                RateMatrix::new(vec![vec![-q01 - kill, q01], vec![q10, -q10]]),
                BranchingMechanism {
                    beta: beta.to_vec(),
                    sigma: sigma.to_vec(),
                    pi,
                },
            )
        })
}

fn vf(m: &SuperprocessModel, f: &[f64], t: f64) -> Vec<f64> {
    let triple = principal_triple(m).unwrap();
    solve_cumulant_at(m, &triple, &FnVec(f.to_vec()), &[t], &SolverOptions::default())
        .unwrap()
        .last()
        .to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn psi_decomposes_and_psi0_is_star_shaped(m in two_site(), z in 0.0f64..50.0) {
        for site in 0..2 {
            let p0 = psi0_eval(&m, site, z).unwrap();
            let p = psi_eval(&m, site, z).unwrap();
            prop_assert!((p - (p0 - m.mech.beta[site] * z)).abs() <= 1e-12 * (1.0 + p.abs()));
            prop_assert!(p0 >= 0.0);
            prop_assert!(p0 <= z * psi0_prime_eval(&m, site, z).unwrap() * (1.0 + 1e-12) + 1e-300);
            prop_assert!(psi0_eval(&m, site, z + 0.5).unwrap() >= p0);
        }
    }

    #[test]
    fn cumulant_is_monotone_and_dominated(
        m in two_site(),
        f in prop::array::uniform2(0.0f64..5.0),
        bump in prop::array::uniform2(0.0f64..5.0),
        t in 0.05f64..3.0,
    ) {
        let g = [f[0] + bump[0], f[1] + bump[1]];
        let (vf_, vg) = (vf(&m, &f, t), vf(&m, &g, t));
        let p = mean_semigroup(&m, t).unwrap();
        for i in 0..2 {
            prop_assert!(vf_[i] <= vg[i] + 1e-9);
            let pf = p[(i, 0)] * f[0] + p[(i, 1)] * f[1];
            prop_assert!(vf_[i] <= pf + 1e-9 * (1.0 + pf));
        }
    }

    #[test]
    fn cumulant_is_scale_concave(
        m in two_site(),
        f in prop::array::uniform2(0.0f64..5.0),
        theta in 0.0f64..1.0,
        t in 0.05f64..3.0,
    ) {
        let scaled = [theta * f[0], theta * f[1]];
        let (v, vs) = (vf(&m, &f, t), vf(&m, &scaled, t));
        for i in 0..2 {
            prop_assert!(vs[i] + 1e-9 >= theta * v[i]);
        }
    }

    #[test]
    fn cumulant_is_a_semigroup(
        m in two_site(),
        f in prop::array::uniform2(0.0f64..5.0),
        t in 0.05f64..2.0,
        s in 0.05f64..2.0,
    ) {
        let triple = principal_triple(&m).unwrap();
        let r = semigroup_residual(&m, &triple, &FnVec(f.to_vec()), t, s, &SolverOptions::default()).unwrap();
        prop_assert!(r < 1e-6, "residual {r}");
    }

    #[test]
    fn feller_flow_composes(b in 0.1f64..3.0, c in 0.1f64..3.0, f in 0.0f64..20.0, t in 0.0f64..5.0, s in 0.0f64..5.0) {
        let p = FellerParams::new(b, c).unwrap();
        let direct = feller_cumulant(p, f, t + s).unwrap();
        let composed = feller_cumulant(p, feller_cumulant(p, f, s).unwrap(), t).unwrap();
        prop_assert!((direct - composed).abs() <= 1e-12 * (1.0 + direct));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn qsd_exponents_are_consistent(
        m in two_site(),
        f in prop::array::uniform2(0.0f64..5.0),
        g1 in 0.05f64..1.0,
        g2 in 0.05f64..1.0,
    ) {
        let triple = principal_triple(&m).unwrap();
        let yt = yaglom_transform(&m, &triple).unwrap();
        let lambda = triple.lambda;
        let f = FnVec(f.to_vec());
        let a = qsd_transform(&yt, &QsdSpec::new(g1 * lambda, lambda).unwrap(), &f).unwrap();
        let b = qsd_transform(&yt, &QsdSpec::new(g2 * lambda, lambda).unwrap(), &f).unwrap();
        let y = yt.evaluate(&f).unwrap();
        prop_assert!((0.0..=1.0).contains(&y));
        if y > 0.0 {
            prop_assert!((a.ln() / g1 - b.ln() / g2).abs() < 1e-10);
        }
    }
}
