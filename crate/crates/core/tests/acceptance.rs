use fractafold::suite::{run_suite, SuiteConfig, CHECK_COUNT};

#[test]
fn acceptance() {
    let cfg = SuiteConfig::default();
    let report = run_suite(&cfg).expect("suite runs");
    assert_eq!(report.checks.len(), CHECK_COUNT);
    println!("config {}", report.config_hash);
    print!("{}", report.table());
    let failed: Vec<_> = report.checks.iter().filter(|c| !c.passes).map(|c| c.id).collect();
    assert!(failed.is_empty(), "failed checks: {failed:?}");
}
