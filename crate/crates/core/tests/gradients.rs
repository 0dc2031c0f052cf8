mod common;

use common::*;

fn over_seeds(name: &str, f: impl Fn(u64) -> f64) {
    let worst = (0..10).map(f).fold(0.0f64, f64::max);
    println!("{name}: max relative error {worst:.2e}");
    assert!(worst < MAX_REL_ERR, "{name}: {worst:.3e}");
}

#[test]
fn conv2d_matches_finite_differences() {
    over_seeds("conv2d", check_conv2d);
}

#[test]
fn avg_pool2d_matches_finite_differences() {
    over_seeds("avg_pool2d", check_avg_pool2d);
}

#[test]
fn relu_matches_finite_differences() {
    over_seeds("relu", check_relu);
}

#[test]
fn linear_matches_finite_differences() {
    over_seeds("linear", check_linear);
}

#[test]
fn mse_matches_finite_differences() {
    over_seeds("mse", check_mse);
}

#[test]
fn joint_loss_matches_finite_differences() {
    over_seeds("joint", |s| check_joint(s, 1.0));
    over_seeds("joint lambda 0.3", |s| check_joint(s, 0.3));
}

#[test]
fn zero_lambda_leaves_inter_encoder_without_gradient() {
    let inst = joint_instance(3);
    let w = cellspan::LossWeights { lambda: 0.0, alpha: 0.5 };
    let (loss, grads) = inst.model.joint_loss_gradients(&inst.intra, &inst.inter, &w).unwrap();
    let intra_only = inst.model.joint_loss(&inst.intra, &[], &w).unwrap();
    assert!((loss - intra_only).abs() <= 1e-15 * loss.abs().max(1.0));
    assert!(grads[6..12].iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    assert!(grads[..6].iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
}
