//! Tape gradients against Richardson-extrapolated finite differences.
//!
//! A wider step keeps the loss difference well above rounding noise, and
//! the extrapolation cancels the O(h²) truncation error of the central
//! stencil, so small gradients can be checked to a tight relative tolerance.

mod common;

use common::{GradFixture, Stencil};

const STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-4;
const MIN_GRAD: f64 = 1e-8;

fn check(seed: u64, edge_prob: f64) {
    let mut fx = GradFixture::new(20, edge_prob, seed).unwrap();
    for (label, groups, loss) in GradFixture::losses() {
        let rep = fx.check(loss, groups, Stencil::Richardson(STEP), MIN_GRAD, REL_TOL).unwrap();
        assert!(rep.checked > 0, "{label}: nothing checked");
        assert_eq!(rep.failed, 0, "{}", rep.summary(label));
    }
}

#[test]
fn acceptance_fixture_gradients_match() {
    check(7, 0.2);
}

#[test]
fn denser_graph_gradients_match() {
    check(11, 0.35);
}
