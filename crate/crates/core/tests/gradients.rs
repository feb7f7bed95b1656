mod common;

use common::{fd_check, fd_check_block, op_cases, FD_TOL};

#[test]
fn every_op_matches_finite_differences() {
    let mut worst = (0.0, "", 0);
    for seed in 0..100 {
        for c in op_cases(seed) {
            let e = fd_check(&c, seed);
            assert!(e.is_finite(), "{} seed {seed}: non-finite error", c.name);
            if e > worst.0 {
                worst = (e, c.name, seed);
            }
        }
    }
    assert!(
        worst.0 < FD_TOL,
        "worst relative error {:.3e} in {} (seed {})",
        worst.0,
        worst.1,
        worst.2
    );
}

#[test]
fn conformer_block_matches_finite_differences() {
    for seed in 0..100 {
        let e = fd_check_block(seed);
        assert!(e < FD_TOL, "seed {seed}: relative error {e:.3e}");
    }
}
