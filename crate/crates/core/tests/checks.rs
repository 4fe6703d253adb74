use unigs::checks::{all_passed, format_report, run_checks};
use unigs::tensor::fault::Fault;

#[test]
fn invariant_suite_passes() {
    let results = run_checks(None, None);
    let report = format_report(&results);
    println!("{report}");
    assert!(all_passed(&results), "{report}");
}

#[test]
fn softmax_fault_is_named() {
    let results = run_checks(Some("attention"), Some(Fault::SoftmaxAxis));
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    assert!(failing.contains(&"sesa_full_attention"), "{}", format_report(&results));
    let results = run_checks(Some("mvdfa"), Some(Fault::SoftmaxAxis));
    assert!(!all_passed(&results), "{}", format_report(&results));
}

#[test]
fn empty_selection_fails() {
    let results = run_checks(Some("no-such-check"), None);
    assert!(!all_passed(&results));
    assert!(format_report(&results).contains("FAIL"));
}
