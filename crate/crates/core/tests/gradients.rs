//! Analytic gradients against central differences in double precision.

mod common;

use common::*;

#[test]
fn demo_loss_gradient() {
    let (worst, n) = kto_fd_max_rel_err(false, 120, 11);
    assert!(n >= 100);
    assert!(worst <= 1e-4, "max relative error {worst:e}");
}

#[test]
fn answer_loss_gradient() {
    let (worst, n) = kto_fd_max_rel_err(true, 120, 12);
    assert!(n >= 100);
    assert!(worst <= 1e-4, "max relative error {worst:e}");
}

#[test]
fn contrastive_loss_gradient() {
    let (worst, n) = contrastive_fd_max_rel_err(120, 13);
    assert!(n >= 100);
    assert!(worst <= 1e-4, "max relative error {worst:e}");
}
