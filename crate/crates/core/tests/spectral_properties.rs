mod common;

use decision_surface::indicator::{eig_sym, eq10_bound, quadratic_form_identity_check, worst_case_bound};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn symmetric(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-10.0f64..10.0, n * n).prop_map(move |v| {
        let a = DMatrix::from_vec(n, n, v);
        (&a + a.transpose()) * 0.5
    })
}

fn case() -> impl Strategy<Value = (DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..10).prop_flat_map(|n| (symmetric(n), prop::collection::vec(-1.0f64..1.0, n), prop::collection::vec(-5.0f64..5.0, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn quadratic_form_equals_spectral_sum((h, delta, _j) in case()) {
        let spec = eig_sym(&h).unwrap();
        let (lhs, rhs) = quadratic_form_identity_check(&h, &spec, &delta);
        let scale = spec.values.iter().map(|l| l.abs()).sum::<f64>() * delta.iter().map(|d| d * d).sum::<f64>();
        prop_assert!((lhs - rhs).abs() <= 1e-8 * scale.max(1.0));
    }

    #[test]
    fn second_order_term_is_bounded((h, delta, j) in case()) {
        let spec = eig_sym(&h).unwrap();
        let (exact, bound) = eq10_bound(&j, &spec, &delta);
        prop_assert!(exact <= bound);
        // The worst case over the l_inf ball dominates any particular delta in it.
        let eps = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        prop_assert!(bound <= worst_case_bound(&j, &spec.values, eps) * (1.0 + 1e-12) + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn fifty_by_fifty_decomposition_invariants(h in symmetric(50)) {
        let spec = eig_sym(&h).unwrap();
        prop_assert!(spec.complete);
        prop_assert!((spec.reconstruct() - &h).amax() < 1e-9);
        let e = &spec.vectors;
        prop_assert!((e.transpose() * e - DMatrix::identity(50, 50)).amax() < 1e-10);
        prop_assert!(spec.values.windows(2).all(|w| w[0].abs() >= w[1].abs()));
    }
}

#[test]
fn deterministic_suite_matches_tolerances() {
    let s = common::checks::spectral_suite(2000, 5, 1);
    assert!(s.identity_err < 1e-8 && s.bound_violations == 0, "{s:?}");
    assert!(s.reconstruction_err < 1e-9 && s.orthonormality_err < 1e-10, "{s:?}");
}
