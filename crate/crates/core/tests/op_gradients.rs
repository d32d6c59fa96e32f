use tridiff_core::op_suite::cases;

#[test]
fn every_op_matches_finite_differences_over_20_seeds() {
    for case in cases() {
        for seed in 0..20 {
            let report = case.check(seed, 1e-4).unwrap();
            assert!(
                report.passed(),
                "{} seed {seed}: max rel error {:e}",
                case.name,
                report.max_rel_error()
            );
            assert!(report.params.iter().all(|p| p.checked > 0), "{} seed {seed}: nothing compared", case.name);
        }
    }
}
