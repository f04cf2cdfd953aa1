mod support;

use support::gradcheck::{check_composed, check_ops, Summary};

#[test]
fn tape_gradients_match_finite_differences() {
    let mut s = Summary::default();
    check_ops(&mut s, 3);
    assert!(s.cases >= 100, "only {} cases", s.cases);
    assert!(s.passed(), "{} failures, first: {:?}", s.failures.len(), s.failures.first());
}

#[test]
fn composed_objectives_match_finite_differences() {
    let mut s = Summary::default();
    check_composed(&mut s, 10);
    assert!(s.passed(), "{} failures, first: {:?}", s.failures.len(), s.failures.first());
}
