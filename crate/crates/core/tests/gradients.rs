mod common;

#[test]
fn full_loss_matches_finite_differences() {
    let (report, names) = common::tiny_gradient_check();
    let worst = report.worst.map(|(i, e, a, n)| (names[i].clone(), e, a, n));
    assert!(report.passed(), "{} of {} failed; worst {worst:?}", report.failures, report.checked);
}
