use hmnet::gradcheck::{composite_cases, gradient_report, reports_csv, unroll_case, GradReport, Kind, COMPOSITE_TOL};

#[test]
fn composites_and_unroll_match_finite_differences() {
    for seed in 0..3 {
        let mut cases = composite_cases(seed).unwrap();
        cases.push(unroll_case(seed).unwrap());
        for case in &cases {
            assert_eq!(case.kind, Kind::Composite);
            let r = gradient_report(case, COMPOSITE_TOL).unwrap();
            assert!(r.pass(), "{} seed {seed}: {:.3e}", r.op, r.max_rel_err());
        }
    }
}

#[test]
fn every_parameter_of_the_unroll_is_checked() {
    let case = unroll_case(0).unwrap();
    let r = gradient_report(&case, COMPOSITE_TOL).unwrap();
    let trainable = case.store.entries().iter().filter(|p| p.trainable).count();
    assert_eq!(r.params.len(), trainable);
    assert!(r.params.iter().all(|p| p.checked > 0));
}

#[test]
fn report_csv_has_one_row_per_parameter() {
    let cases = composite_cases(1).unwrap();
    let reports: Vec<GradReport> = cases.iter().take(3).map(|c| gradient_report(c, COMPOSITE_TOL).unwrap()).collect();
    let csv = reports_csv(&reports);
    let rows: usize = reports.iter().map(|r| r.params.len()).sum();
    assert!(csv.starts_with(GradReport::CSV_HEADER));
    assert_eq!(csv.lines().count(), rows + 1);
}
