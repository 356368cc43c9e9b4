mod common;

use common::loss_suite::{self, Check};

fn assert_all(checks: Vec<Check>) {
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

fn run(f: fn(&mut Vec<Check>)) {
    let mut out = Vec::new();
    f(&mut out);
    assert!(!out.is_empty());
    assert_all(out);
}

#[test]
fn patch_contrastive_loss() {
    run(loss_suite::beta_checks);
}

#[test]
fn reconstruction_loss() {
    run(loss_suite::rec_checks);
}

#[test]
fn perceptual_loss() {
    run(loss_suite::perc_checks);
}

#[test]
fn adversarial_losses() {
    run(loss_suite::adv_checks);
}

#[test]
fn global_style_loss() {
    run(loss_suite::global_checks);
}

#[test]
fn directional_loss() {
    run(loss_suite::dir_checks);
}

#[test]
fn image_metrics() {
    run(loss_suite::metric_checks);
}

