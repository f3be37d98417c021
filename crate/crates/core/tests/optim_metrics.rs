mod common;

#[test]
fn adamw_matches_reference_trace() {
    common::adamw_trace().unwrap();
}

#[test]
fn auc_equals_pairwise_count() {
    common::auc_matches_pairwise().unwrap();
}

#[test]
fn warmup_endpoint_and_monotone_decay() {
    common::schedule_boundaries().unwrap();
}
