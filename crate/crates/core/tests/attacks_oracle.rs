mod common;

use decision_surface::attacks::{run_attack, AttackSpec};

#[test]
fn fgsm_is_one_bim_step_bit_for_bit() {
    let ds = common::mnist_test().take(20);
    let net = decision_surface::nn::Network::init(decision_surface::nn::NetworkSpec::mnist_mlp(), 3).unwrap();
    assert_eq!(common::checks::fgsm_bim_mismatches(&net, &ds, 20, &[0.0, 0.1, 0.3]), 0);
}

#[test]
fn iterates_stay_in_the_ball_and_the_pixel_range() {
    let net = common::small_conv_net(6);
    for k in 0..10 {
        let x = common::values(36, k, 0.0, 1.0);
        for spec in [AttackSpec::fgsm(0.2), AttackSpec::bim(0.1, 0.03, 7), AttackSpec::cw_pgd(0.05, 0.02, 12)] {
            let r = run_attack(&net, &x, k as usize % 3, &spec).unwrap();
            for p in &r.trajectory {
                for (a, b) in p.point.iter().zip(&x) {
                    assert!((a - b).abs() <= spec.epsilon + 1e-12 && (0.0..=1.0).contains(a));
                }
            }
        }
    }
}
