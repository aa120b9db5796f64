mod common;

#[test]
fn training_and_inference_are_reproducible() {
    common::checks::determinism().unwrap();
}
