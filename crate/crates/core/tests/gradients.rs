mod common;

use common::{grad_trial, GradLoss, GRAD_TOL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check(which: GradLoss, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..20 {
        let err = grad_trial(which, &mut rng);
        assert!(err <= GRAD_TOL, "{which:?} trial {trial}: relative error {err:e}");
    }
}

#[test]
fn segmentation_loss_gradients() {
    check(GradLoss::Is, 1);
}

#[test]
fn ivp_loss_gradients() {
    check(GradLoss::Ivp, 2);
}

#[test]
fn distance_contrastive_gradients() {
    check(GradLoss::Cd, 3);
}

#[test]
fn boundary_contrastive_gradients() {
    check(GradLoss::Cb, 4);
}

#[test]
fn adaptation_loss_gradients() {
    check(GradLoss::Adapt, 5);
}
