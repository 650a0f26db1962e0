mod common;

#[test]
fn every_parameter_matches_central_differences() {
    let report = common::gradient_check(11, 1e-5);
    assert!(report.params <= 5000, "{} parameters", report.params);
    assert!(
        report.worst < 1e-4,
        "worst relative error {:.3e} at tensor {} index {}",
        report.worst,
        report.worst_at.0,
        report.worst_at.1
    );
}
