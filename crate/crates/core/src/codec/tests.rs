//! Unit-scale runs of the contract checks plus shuffle-pass specifics.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checks::*;
use super::*;
use crate::schema::SchemaNode;

#[test]
fn struct_fields_ignore_later_fields_holds() {
    struct_fields_ignore_later_fields(15, 11);
}

#[test]
fn list_length_and_items_ignore_the_future_holds() {
    list_length_and_items_ignore_the_future(15, 12);
}

#[test]
fn padding_never_reaches_loss_or_gradients_holds() {
    padding_never_reaches_loss_or_gradients(15, 13);
}

#[test]
fn padded_item_embeddings_get_zero_gradient_holds() {
    padded_item_embeddings_get_zero_gradient(5, 14);
}

#[test]
fn shuffled_struct_matches_reordered_plain_struct_holds() {
    shuffled_struct_matches_reordered_plain_struct(15, 15);
}

#[test]
fn set_matches_reordered_plain_list_holds() {
    set_matches_reordered_plain_list(15, 16);
}

#[test]
fn enumerated_joint_sums_to_one_holds() {
    enumerated_joint_sums_to_one(10, 17, 5);
}

#[test]
fn sampler_follows_the_model_joint_holds() {
    sampler_follows_the_model_joint(3, 18);
}

#[test]
fn samples_conform_to_the_layout_holds() {
    samples_conform_to_the_layout(10, 19);
}

#[test]
fn codec_gradients_match_finite_differences_holds() {
    codec_gradients_match_finite_differences(5, 20, small_cfg);
}

#[test]
fn passes_need_a_shuffled_node() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let schema = random_struct("root", 0, &mut rng, false);
    let (tree, store) = build(&schema, small_cfg(&mut rng), &mut rng);
    let x = tree.layout().batch_values(&[random_value(&tree.layout(), &mut rng)]).unwrap();
    let mut g = Graph::new(&store);
    assert!(tree.loss_passes(&mut g, &x, 2, &mut rng).is_err());
    assert!(tree.loss_passes(&mut g, &x, 0, &mut rng).is_err());
    assert!(tree.loss_passes(&mut g, &x, 1, &mut rng).is_ok());
}

#[test]
fn single_pass_with_identity_order_is_the_plain_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let schema = SchemaNode::Struct {
        name: "root".into(),
        fields: vec![random_leaf("a", &mut rng, true)],
        shuffled: true,
    };
    let (tree, store) = build(&schema, small_cfg(&mut rng), &mut rng);
    let values: Vec<Value> = (0..4).map(|_| random_value(&tree.layout(), &mut rng)).collect();
    let x = tree.layout().batch_values(&values).unwrap();
    let mut g = Graph::inference(&store);
    let a = tree.loss(&mut g, &x, &mut Shuffle::Off).unwrap();
    let b = tree.loss_passes(&mut g, &x, 1, &mut rng).unwrap();
    assert_eq!(g.value(a).item().to_bits(), g.value(b).item().to_bits());
}

#[test]
fn shuffled_passes_average_valid_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let schema = SchemaNode::Struct {
        name: "root".into(),
        fields: vec![random_leaf("a", &mut rng, true), random_leaf("b", &mut rng, false)],
        shuffled: true,
    };
    let cfg = small_cfg(&mut rng);
    let (tree, store) = build(&schema, cfg.clone(), &mut rng);
    let values: Vec<Value> = (0..4).map(|_| random_value(&tree.layout(), &mut rng)).collect();
    let x = tree.layout().batch_values(&values).unwrap();
    let seed = rng.random::<u64>();
    let mut g = Graph::inference(&store);
    let c = tree.conditioning(&mut g, 4).unwrap();
    let two = tree
        .root()
        .shuffled_loss(&mut g, c, &x, &[1.0; 4], 2, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap();
    let mut replay = ChaCha8Rng::seed_from_u64(seed);
    let first = Shuffle::Random(&mut replay).permutation(2);
    let second = Shuffle::Random(&mut replay).permutation(2);
    let a = reordered_plain_loss(&tree, &store, &schema, &cfg, &first, &values);
    let b = reordered_plain_loss(&tree, &store, &schema, &cfg, &second, &values);
    assert_eq!(g.value(two).item().to_bits(), ((a + b) * 0.5).to_bits());
}

#[test]
fn shuffle_rng_is_only_consumed_when_asked() {
    let mut a = ChaCha8Rng::seed_from_u64(0);
    let b = a.clone();
    assert_eq!(Shuffle::Off.permutation(5), vec![0, 1, 2, 3, 4]);
    let _ = Shuffle::Off.permutation(3);
    assert_eq!(a.next_u64(), b.clone().next_u64());
}
