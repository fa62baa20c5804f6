#[path = "support/grad_cases.rs"]
mod grad_cases;

use latent_autograd::check::GradCheckReport;
use latent_core::config::Mode;
use grad_cases::*;

fn assert_passes(what: &str, r: &GradCheckReport) {
    assert!(r.passes(TOL), "{what}: max rel err {:.3e} at {:?} over {} entries", r.max_rel_err, r.worst, r.checked);
}

#[test]
fn inverse_dynamics_soft_mode() {
    assert_passes("inverse", &inverse_case());
}

#[test]
fn text_to_image_text_projection() {
    assert_passes("t2vt", &projector_case(0));
}

#[test]
fn image_text_to_text_projection() {
    assert_passes("vt2t", &projector_case(1));
}

#[test]
fn cycle_consistency() {
    assert_passes("cycle", &projector_case(2));
}

#[test]
fn behavior_cloning() {
    assert_passes("bc", &bc_case());
}

#[test]
fn rl_surrogate_and_kl_latent() {
    assert_passes("rl latent", &rl_case(Mode::Latent));
}

#[test]
fn rl_surrogate_and_kl_token() {
    assert_passes("rl token", &rl_case(Mode::Token));
}
