use weave_bench::{attention_inputs, toy};
use weave_core::conditioning::masked_cross_attention;

#[test]
fn toy_room_has_one_reference_per_instance() {
    let (scene, refs) = toy();
    assert_eq!(scene.instance_count as usize, refs.len());
}

#[test]
fn attention_inputs_are_consistent_and_seeded() {
    let a = attention_inputs(3);
    let out = masked_cross_attention(&a.queries, &a.tokens, &a.masks, &a.weights, false).unwrap();
    assert_eq!(out.shape(), a.queries.shape());
    assert_eq!(attention_inputs(3).queries, a.queries);
    assert_ne!(attention_inputs(4).queries, a.queries);
}
