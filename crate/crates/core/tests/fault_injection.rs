//! Mutation check of the oracle battery. Only meaningful in builds with
//! `--features fault-injection`, which flip the sign of the cross term `b`.
#![cfg(feature = "fault-injection")]

use saes_svd::oracle::run_selftest;

#[test]
fn battery_catches_flipped_cross_term() {
    let results = run_selftest(100, 0);
    let foa = results.iter().find(|r| r.name == "fs_foa_exactness").unwrap();
    assert!(!foa.passed, "{foa:?}");
    for name in ["dominance", "completion_of_squares", "projection_identity", "partition_invariance"] {
        let r = results.iter().find(|r| r.name == name).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
