mod common;

use common::check_store_histories;

#[test]
fn snapshot_and_replay_recovery_agree_over_random_histories() {
    let check = check_store_histories(200, 11);
    assert_eq!(check.histories, 200);
    assert_eq!(check.mismatches, 0, "{:?}", check.first_failure);
    assert!(check.checkpoints > 0);
    assert!(check.transactions > 1000, "histories too short: {} txns", check.transactions);
}
