mod common;

use common::cases;
use earseg_core::nn::{Mode, Padding};

const TOL: f64 = 1e-3;

fn ok(label: &str, (err, at): cases::Worst) {
    assert!(err < TOL, "{label}: {err:e} at {at}");
}

#[test]
fn conv3x3_replicate() {
    ok("conv3x3 s1", cases::conv(3, 1, 1, Padding::Replicate, false));
    ok("conv3x3 s2", cases::conv(3, 2, 1, Padding::Replicate, false));
}

#[test]
fn conv3x3_zeros() {
    ok("conv3x3 zeros", cases::conv(3, 1, 1, Padding::Zeros, true));
}

#[test]
fn conv1x1() {
    ok("conv1x1", cases::conv(1, 1, 0, Padding::Replicate, true));
}

#[test]
fn batchnorm_train_and_eval() {
    ok("bn train", cases::batchnorm(Mode::Train));
    ok("bn eval", cases::batchnorm(Mode::Eval));
}

#[test]
fn cross_entropy_head() {
    ok("ce head", cases::cross_entropy_head());
}

#[test]
fn upsample_adjoint() {
    ok("upsample", cases::upsample_adjoint());
}

#[test]
fn eam_end_to_end() {
    ok("eam", cases::eam_end_to_end());
}

#[test]
fn backbone_end_to_end() {
    ok("backbone", cases::backbone_end_to_end());
}
