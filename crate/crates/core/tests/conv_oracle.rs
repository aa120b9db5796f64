mod common;

use common::checks::{conv_oracle, CONV_TOLERANCE};

#[test]
fn fifty_random_shapes_match_nested_loops() {
    let err = conv_oracle(50, 1);
    assert!(err < CONV_TOLERANCE, "max abs error {err:e}");
}
