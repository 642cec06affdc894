mod common;

use common::check_throttle;

#[test]
fn baseline_never_exceeds_throttle_over_random_runs() {
    let check = check_throttle(300, 3);
    assert_eq!(check.violations, 0, "{:?}", check.first_failure);
    assert!(check.starts > 1000, "only {} starts", check.starts);
}
