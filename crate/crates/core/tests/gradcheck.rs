mod common;

use common::{encoder_check, op_checks, probe_check, FD_TOLERANCE};
use keyscope::probe::ProbeArch;

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..4 {
        for (name, err) in op_checks(seed).unwrap() {
            assert!(err < FD_TOLERANCE, "{name} (seed {seed}): relative error {err:e}");
        }
    }
}

#[test]
fn encoder_projector_ntxent_chain() {
    for seed in [1, 2] {
        let err = encoder_check(seed).unwrap();
        assert!(err < FD_TOLERANCE, "seed {seed}: {err:e}");
    }
}

#[test]
fn linear_probe() {
    let err = probe_check(&ProbeArch::linear(), 4, 3).unwrap();
    assert!(err < FD_TOLERANCE, "{err:e}");
}

#[test]
fn bb_reference_probe() {
    let err = probe_check(&ProbeArch::bb_reference(), 3, 4).unwrap();
    assert!(err < FD_TOLERANCE, "{err:e}");
}

#[test]
fn gs_reference_probe() {
    let err = probe_check(&ProbeArch::gs_reference(), 2, 5).unwrap();
    assert!(err < FD_TOLERANCE, "{err:e}");
}
