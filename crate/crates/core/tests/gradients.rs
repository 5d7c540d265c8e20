//! Finite-difference checks of every hand-written backward pass.

use rrpn_core::nn::Parameterized;
use rrpn_oracles::gradients::{self, verdict, JOINT_LAMBDA};

fn assert_ok(what: &str, report: &rrpn_core::gradcheck::GradCheckReport) {
    if let Err(e) = verdict(report) {
        panic!("{what}: {e}");
    }
}

#[test]
fn bce_gradient_matches_central_differences() {
    for (what, r) in gradients::bce() {
        assert_ok(what, &r);
    }
}

#[test]
fn attention_loss_gradient_through_the_whole_network() {
    for (what, r) in gradients::rrpn() {
        assert_ok(what, &r);
    }
}

#[test]
fn detection_loss_gradient_wrt_predictions() {
    assert_ok("detection head output", &gradients::detection_head_output());
}

#[test]
fn detection_loss_gradient_through_head_and_backbone() {
    assert_ok("detector parameters", &gradients::detector_parameters());
}

#[test]
fn joint_loss_gradient_reaches_the_shared_backbone() {
    let (grad, report) = gradients::joint_source(JOINT_LAMBDA, true);
    assert_ok("joint source loss", &report.unwrap());
    let (det_only, _) = gradients::joint_source(0.0, false);
    assert_ne!(
        Parameterized::tensors(&grad.backbone)[0].data,
        Parameterized::tensors(&det_only.backbone)[0].data
    );
}
