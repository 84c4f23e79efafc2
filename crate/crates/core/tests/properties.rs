mod props;

#[test]
fn spec_round_trip() {
    props::spec_round_trip().unwrap();
}

#[test]
fn plan_purity() {
    props::plan_purity().unwrap();
}

#[test]
fn structure_preservation() {
    props::structure_preservation().unwrap();
}

#[test]
fn inference_idempotence() {
    props::inference_idempotence().unwrap();
}

#[test]
fn typing_order_insensitive() {
    props::typing_order_insensitive().unwrap();
}

#[test]
fn dedup_idempotence() {
    props::dedup_idempotence().unwrap();
}

#[test]
fn feedback_decode_total() {
    props::feedback_decode_total().unwrap();
}

#[test]
fn threshold_oracle() {
    props::threshold_oracle().unwrap();
}

#[test]
fn coverage_monotone() {
    props::coverage_monotone().unwrap();
}
