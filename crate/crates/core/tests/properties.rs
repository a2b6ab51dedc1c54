use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use ivate::estimator::estimate_tau;
use ivate::links::{rho_eval, tanh_link_eval, RhoFamily};
use ivate::sieve::{build_raw_basis, BasisFamily, BasisSpec, SieveBasis};
use ivate::simulator::{generate, summarize, DgpConfig, RepOutcome};
use ivate::solver::{newton_maximize, solve_p, solve_q, ConcaveProblem, Evaluation, NewtonOptions};
use ivate::variance::variance_report;
use ivate::{Dataset, Result};

fn family() -> impl Strategy<Value = RhoFamily> {
    prop::sample::select(RhoFamily::ALL.to_vec())
}

fn basis_family() -> impl Strategy<Value = BasisFamily> {
    prop::sample::select(vec![BasisFamily::Power, BasisFamily::Spline])
}

fn sample(n: usize, seed: u64) -> Dataset {
    generate(&DgpConfig::reference(n, seed)).unwrap()
}

/// `max |(1/N) Σ_{arm} wᵢuᵢ − ū|`.
fn arm_residual(basis: &SieveBasis, on: impl Fn(usize) -> bool, w: &DVector<f64>) -> f64 {
    let mut lhs = DVector::zeros(basis.k());
    for i in (0..basis.n()).filter(|&i| on(i)) {
        lhs += basis.eval.row(i).transpose() * w[i];
    }
    (lhs / basis.n() as f64 - basis.eval.row_mean().transpose()).amax()
}

struct Quadratic {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl ConcaveProblem for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn init(&self) -> DVector<f64> {
        DVector::zeros(self.b.len())
    }

    fn evaluate(&self, t: &DVector<f64>) -> Result<Evaluation> {
        let at = &self.a * t;
        Ok(Evaluation {
            value: -0.5 * t.dot(&at) + self.b.dot(t),
            grad: &self.b - at,
            hess: -self.a.clone(),
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn orthonormalized_basis_has_identity_gram(
        n in 60usize..300,
        seed in any::<u64>(),
        k in 1usize..7,
        fam in basis_family(),
    ) {
        let data = sample(n, seed);
        let basis = SieveBasis::build(&data.x, fam.spec(k)).unwrap();
        prop_assert!(basis.gram_deviation() <= 1e-10);
        // the constant function lies in the span
        let c = basis.constant_coefficients();
        prop_assert!((&basis.eval * c).iter().all(|v| (v - 1.0).abs() <= 1e-9));
    }

    #[test]
    fn orthonormalization_depends_only_on_the_span(
        seed in any::<u64>(),
        k in 2usize..5,
        scales in prop::collection::vec(0.1f64..10.0, 5),
    ) {
        let data = sample(150, seed);
        let raw = build_raw_basis(&data.x, BasisSpec::power(k)).unwrap();
        let scaled = DMatrix::from_fn(raw.nrows(), k, |i, j| raw[(i, j)] * scales[j]);
        let a = SieveBasis::from_raw(BasisSpec::power(k), raw).unwrap();
        let b = SieveBasis::from_raw(BasisSpec::power(k), scaled).unwrap();
        // projections onto the span coincide
        let pa = &a.eval * a.eval.transpose();
        let pb = &b.eval * b.eval.transpose();
        prop_assert!((pa - pb).amax() <= 1e-8);
    }

    #[test]
    fn calibration_weights_balance_every_basis_function(
        n in 100usize..400,
        seed in any::<u64>(),
        k in 1usize..4,
        rho in family(),
    ) {
        let data = sample(n, seed);
        let basis = SieveBasis::build(&data.x, BasisSpec::power(k)).unwrap();
        let p = solve_p(&data, &basis, &rho).unwrap();
        let q = solve_q(&data, &basis, &rho).unwrap();
        prop_assert!(arm_residual(&basis, |i| data.z[i] == 1.0, &p.weights) <= 1e-7);
        prop_assert!(arm_residual(&basis, |i| data.z[i] == 0.0, &q.weights) <= 1e-7);
        for i in 0..n {
            let w = if data.z[i] == 1.0 { p.weights[i] } else { q.weights[i] };
            prop_assert!(w.is_finite());
        }
    }

    #[test]
    fn estimate_is_permutation_invariant(
        seed in any::<u64>(),
        rho in family(),
        shuffle_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let data = sample(250, seed);
        let mut perm: Vec<usize> = (0..data.n()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha20Rng::seed_from_u64(shuffle_seed));
        let a = estimate_tau(&data, BasisSpec::power(2), BasisSpec::power(2), &rho).unwrap();
        let b = estimate_tau(&data.permuted(&perm), BasisSpec::power(2), BasisSpec::power(2), &rho).unwrap();
        prop_assert!((a.tau_hat - b.tau_hat).abs() <= 1e-10);
    }

    #[test]
    fn variance_is_nonnegative_and_interval_is_centered(
        seed in any::<u64>(),
        k1 in 1usize..4,
        k2 in 1usize..3,
        rho in family(),
    ) {
        let data = sample(300, seed);
        let est = estimate_tau(&data, BasisSpec::power(k1), BasisSpec::power(k2), &rho).unwrap();
        let v = variance_report(&data, &est, &rho).unwrap();
        prop_assert!(v.v_hat >= 0.0 && v.v_hat.is_finite());
        prop_assert!(((v.ci95.0 + v.ci95.1) / 2.0 - est.tau_hat).abs() <= 1e-12);
        prop_assert!((v.se - (v.v_hat / 300.0).sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn rmse_decomposes_into_bias_and_spread(
        taus in prop::collection::vec(-1.0f64..1.0, 1..60),
        truth in -1.0f64..1.0,
    ) {
        let outcomes: Vec<_> = taus
            .iter()
            .map(|&t| Ok(RepOutcome { tau_hat: t, se: 0.1, ci95: (t - 0.2, t + 0.2), k: None }))
            .collect();
        let r = summarize("x", &outcomes, truth, 10).unwrap();
        prop_assert!((r.rmse.powi(2) - r.bias.powi(2) - r.stdev.powi(2)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.coverage95));
    }

    #[test]
    fn newton_solves_concave_quadratics(
        entries in prop::collection::vec(-1.0f64..1.0, 16),
        b in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        let m = DMatrix::from_vec(4, 4, entries);
        let a = &m * m.transpose() + DMatrix::identity(4, 4);
        let b = DVector::from_vec(b);
        let problem = Quadratic { a: a.clone(), b: b.clone() };
        let res = newton_maximize(&problem, NewtonOptions::default()).unwrap();
        let exact = a.lu().solve(&b).unwrap();
        prop_assert!((res.theta - exact).amax() <= 1e-9);
    }

    #[test]
    fn generator_derivatives_match_finite_differences(
        rho in family(),
        v in -0.8f64..3.0,
    ) {
        let h = 1e-5;
        let r = rho_eval(rho, v).unwrap();
        let up = rho_eval(rho, v + h).unwrap();
        let dn = rho_eval(rho, v - h).unwrap();
        prop_assert!((r.d1 - (up.rho - dn.rho) / (2.0 * h)).abs() <= 1e-6 * r.d1.abs().max(1.0));
        prop_assert!((r.d2 - (up.d1 - dn.d1) / (2.0 * h)).abs() <= 1e-6 * r.d2.abs().max(1.0));
        prop_assert!(r.d2 < 0.0);
    }

    #[test]
    fn tanh_link_derivatives(v in -40.0f64..40.0) {
        let (f, f1, f2) = tanh_link_eval(v);
        prop_assert!(f.is_finite());
        prop_assert!((f1 - v.tanh()).abs() <= 1e-15);
        prop_assert!((f2 - (1.0 - v.tanh().powi(2))).abs() <= 1e-15);
    }

    #[test]
    fn longer_samples_extend_shorter_ones(seed in any::<u64>(), short in 2usize..200, extra in 0usize..200) {
        let long = sample(short + extra, seed);
        prop_assert_eq!(long.head(short).unwrap(), sample(short, seed));
    }
}
