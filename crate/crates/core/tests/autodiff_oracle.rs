mod common;

use common::checks::autodiff_oracle;

#[test]
fn tape_derivatives_agree_with_finite_differences() {
    let r = autodiff_oracle();
    assert_eq!(r.cases, 8);
    assert!(r.input_grad_rel < 1e-5, "{r:?}");
    assert!(r.param_grad_rel < 1e-5, "{r:?}");
    assert!(r.hvp_rel < 1e-4, "{r:?}");
    assert!(r.mixed_rel < 1e-4, "{r:?}");
    assert!(r.hessian_asymmetry < 1e-8, "{r:?}");
}
