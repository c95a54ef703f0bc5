use afa_harness::gradcheck::{check_path, run_gradcheck, LossPath, TOLERANCE};

#[test]
fn every_loss_path_matches_finite_differences() {
    let report = run_gradcheck(7, &LossPath::ALL, 20).unwrap();
    for p in &report.paths {
        println!("{:<18} max_rel_error={:.3e} coords={}", p.path, p.max_rel_error, p.coordinates);
    }
    assert!(report.passed, "failing paths: {:?}", report.failures());
    assert!(report.paths.iter().all(|p| p.instances >= 20));
}

#[test]
fn detached_backward_is_reported_by_name() {
    let r = check_path(LossPath::CorruptedDetach, 7, 3, 24).unwrap();
    assert!(!r.passed);
    assert!(r.max_rel_error > TOLERANCE);
    assert_eq!(r.path, "corrupted(detach)");
}
