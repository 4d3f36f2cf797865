//! Analytic gradients against central finite differences for every primitive and KD loss.

#[path = "support/gradcases.rs"]
mod gradcases;

#[test]
fn analytic_gradients_match_central_differences() {
    let start = std::time::Instant::now();
    let report = gradcases::run_all(20240601);
    assert!(report.cases >= 100, "only {} cases", report.cases);
    assert!(report.failures.is_empty(), "{}", report.failures.join("\n"));
    assert!(start.elapsed().as_secs() < 60);
}
