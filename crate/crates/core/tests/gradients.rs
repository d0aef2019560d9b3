use ldam_core::gradsuite::{pool_routing_discrepancy, run_suite};

#[test]
fn every_layer_kind_matches_finite_differences_on_100_cases() {
    let results = run_suite(100, 7).unwrap();
    for r in &results {
        println!("{:<30} max rel err {:.3e} (tol {:.0e}, {} kink coords masked)", r.kind, r.max_error, r.tolerance, r.masked);
    }
    for r in &results {
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn max_pool_routes_every_upstream_gradient_once() {
    assert!(pool_routing_discrepancy(100, 3).unwrap() < 1e-4);
}
