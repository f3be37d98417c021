mod common;

#[test]
fn attention_rows_and_class_probabilities_normalise() {
    common::attention_rows_and_probabilities().unwrap();
}

#[test]
fn zero_weight_blocks_are_identities() {
    common::zero_residual_identities().unwrap();
}
