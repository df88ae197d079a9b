//! Randomized checks of the codec contracts: causality, masking, shuffle
//! soundness, normalization and gradients on random trees.
//!
//! Each check draws `cases` random configurations from `seed` and panics
//! with a description of the first violation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CategoricalCodec, Codec, CodecTree, DistRep, ListCodec, QuantileTable, Shuffle, Value};
use crate::data::{BatchTree, Encodings, Layout};
use crate::schema::{compile, CompileOptions, SchemaNode};
use crate::tensor::{Gradients, Graph, NodeId, ParamStore, Tape, Tensor, TransformerConfig};

pub fn random_leaf(name: &str, rng: &mut impl Rng, categorical_only: bool) -> SchemaNode {
    if categorical_only || rng.random_bool(0.6) {
        SchemaNode::Categorical {
            name: name.into(),
            cardinality: Some(rng.random_range(1..=4)),
            symbols: None,
        }
    } else {
        SchemaNode::Numerical {
            name: name.into(),
            bins: None,
            integer: false,
        }
    }
}

pub fn random_node(name: &str, depth: usize, rng: &mut impl Rng) -> SchemaNode {
    if depth == 0 || rng.random_bool(0.4) {
        return random_leaf(name, rng, false);
    }
    if rng.random_bool(0.5) {
        random_struct(name, depth - 1, rng, false)
    } else {
        random_list(name, depth - 1, rng, false)
    }
}

pub fn random_struct(name: &str, depth: usize, rng: &mut impl Rng, shuffled: bool) -> SchemaNode {
    let n = rng.random_range(1..=3);
    SchemaNode::Struct {
        name: name.into(),
        fields: (0..n).map(|i| random_node(&format!("f{i}"), depth, rng)).collect(),
        shuffled,
    }
}

pub fn random_list(name: &str, depth: usize, rng: &mut impl Rng, shuffled: bool) -> SchemaNode {
    SchemaNode::List {
        name: name.into(),
        max_len: rng.random_range(1..=4),
        item: Box::new(random_node("item", depth, rng)),
        shuffled,
    }
}

/// Quantile tables for every numeric node.
pub fn tables_for(schema: &SchemaNode, rng: &mut impl Rng) -> Encodings {
    let mut enc = Encodings::default();
    schema.walk(&mut |path, node| {
        if let SchemaNode::Numerical { .. } = node {
            let n = rng.random_range(2..=5);
            let mut q: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            q.sort_by(f64::total_cmp);
            enc.set_table(path, QuantileTable::new(q, false).unwrap());
        }
    });
    enc
}

pub fn small_cfg(rng: &mut ChaCha8Rng) -> TransformerConfig {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    TransformerConfig {
        width: heads * rng.random_range(2..=4),
        blocks: rng.random_range(1..=2),
        heads,
        init_std: 0.5,
    }
}

pub fn build(schema: &SchemaNode, cfg: TransformerConfig, rng: &mut ChaCha8Rng) -> (CodecTree<f64>, ParamStore<f64>) {
    let enc = tables_for(schema, rng);
    let opts = CompileOptions {
        transformer: cfg,
        ..Default::default()
    };
    let (tree, mut store) = compile::<f64>(schema, &enc, &opts, rng).unwrap();
    // a non-zero c0 so the first decoder position carries signal
    let c0 = tree.c0();
    for v in store.get_mut(c0).data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    (tree, store)
}

pub fn random_value(layout: &Layout, rng: &mut impl Rng) -> Value {
    match layout {
        Layout::Categorical { cardinality } => Value::Cat(rng.random_range(0..*cardinality)),
        Layout::Numerical(t) => {
            let q = t.quantiles();
            Value::Num(rng.random_range(q[0]..=q[q.len() - 1]))
        }
        Layout::Struct(children) => Value::Struct(children.iter().map(|c| random_value(c, rng)).collect()),
        Layout::List { max_len, item } => {
            let m = rng.random_range(0..=*max_len);
            Value::List((0..m).map(|_| random_value(item, rng)).collect())
        }
    }
}

/// Leaf logits in declared order.
fn leaves(dist: &DistRep, out: &mut Vec<NodeId>) {
    match dist {
        DistRep::Logits(id) => out.push(*id),
        DistRep::Struct { children, .. } => children.iter().for_each(|c| leaves(c, out)),
        DistRep::List { length, items, .. } => {
            leaves(length, out);
            leaves(items, out);
        }
    }
}

/// The leaf that depends on nothing but the codec's conditioning vector.
fn first_leaf(dist: &DistRep) -> NodeId {
    match dist {
        DistRep::Logits(id) => *id,
        DistRep::Struct { children, order } => first_leaf(&children[order[0]]),
        DistRep::List { length, .. } => first_leaf(length),
    }
}

/// Runs encode/decode of the whole tree on `values` and hands back the
/// distribution with the graph it lives on.
fn distribution<'p>(tree: &CodecTree<f64>, store: &'p ParamStore<f64>, values: &[Value]) -> (Graph<'p, f64>, DistRep) {
    let x = tree.layout().batch_values(values).unwrap();
    let mut g = Graph::inference(store);
    let enc = tree.root().encode(&mut g, &x, &mut Shuffle::Off).unwrap();
    let c = tree.conditioning(&mut g, values.len()).unwrap();
    let dist = tree.root().decode(&mut g, c, &enc.context).unwrap();
    (g, dist)
}

fn same_rows(a: &Tensor<f64>, b: &Tensor<f64>, keep: impl Fn(usize) -> bool) -> bool {
    assert_eq!(a.shape(), b.shape());
    (0..a.rows()).filter(|&r| keep(r)).all(|r| {
        a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

pub fn struct_fields_ignore_later_fields(cases: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let schema = random_struct("root", 2, &mut rng, false);
        let cfg = small_cfg(&mut rng);
        let (tree, store) = build(&schema, cfg, &mut rng);
        let layout = tree.layout();
        let Layout::Struct(fields) = &layout else { unreachable!() };
        let n = fields.len();
        let rows = 5;
        let values: Vec<Value> = (0..rows).map(|_| random_value(&layout, &mut rng)).collect();
        let (g0, d0) = distribution(&tree, &store, &values);
        let DistRep::Struct { children: c0, .. } = &d0 else { unreachable!() };
        for k in 0..n {
            let perturbed: Vec<Value> = values
                .iter()
                .map(|v| {
                    let Value::Struct(xs) = v else { unreachable!() };
                    Value::Struct(
                        xs.iter()
                            .enumerate()
                            .map(|(j, x)| if j >= k { random_value(&fields[j], &mut rng) } else { x.clone() })
                            .collect(),
                    )
                })
                .collect();
            let (g1, d1) = distribution(&tree, &store, &perturbed);
            let DistRep::Struct { children: c1, .. } = &d1 else { unreachable!() };
            for j in 0..k {
                let (mut a, mut b) = (vec![], vec![]);
                leaves(&c0[j], &mut a);
                leaves(&c1[j], &mut b);
                for (a, b) in a.iter().zip(&b) {
                    assert!(same_rows(g0.value(*a), g1.value(*b), |_| true), "field {j} moved (k = {k})");
                }
            }
            let (a, b) = (first_leaf(&c0[k]), first_leaf(&c1[k]));
            assert!(same_rows(g0.value(a), g1.value(b), |_| true), "condition of field {k} moved");
        }
    }
}

pub fn list_length_and_items_ignore_the_future(cases: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let schema = random_list("root", 2, &mut rng, false);
        let cfg = small_cfg(&mut rng);
        let (tree, store) = build(&schema, cfg, &mut rng);
        let layout = tree.layout();
        let Layout::List { max_len, item } = &layout else { unreachable!() };
        let l = *max_len;
        let rows = 6;
        let values: Vec<Value> = (0..rows).map(|_| random_value(&layout, &mut rng)).collect();
        let (g0, d0) = distribution(&tree, &store, &values);
        let DistRep::List { length: len0, items: it0, .. } = &d0 else { unreachable!() };

        // the length distribution sees only the conditioning vector
        let other: Vec<Value> = (0..rows).map(|_| random_value(&layout, &mut rng)).collect();
        let (g1, d1) = distribution(&tree, &store, &other);
        let DistRep::List { length: len1, .. } = &d1 else { unreachable!() };
        assert!(same_rows(g0.value(first_leaf(len0)), g1.value(first_leaf(len1)), |_| true));

        for i in 0..l {
            let perturbed: Vec<Value> = values
                .iter()
                .map(|v| {
                    let Value::List(xs) = v else { unreachable!() };
                    Value::List(
                        xs.iter()
                            .enumerate()
                            .map(|(j, x)| if j >= i { random_value(item, &mut rng) } else { x.clone() })
                            .collect(),
                    )
                })
                .collect();
            let (g1, d1) = distribution(&tree, &store, &perturbed);
            let DistRep::List { items: it1, .. } = &d1 else { unreachable!() };
            let (mut a, mut b) = (vec![], vec![]);
            leaves(it0, &mut a);
            leaves(it1, &mut b);
            for (a, b) in a.iter().zip(&b) {
                let mult = g0.value(*a).rows() / (rows * l);
                assert!(
                    same_rows(g0.value(*a), g1.value(*b), |r| (r / mult) % l < i),
                    "earlier item moved (i = {i})"
                );
            }
            let (a, b) = (first_leaf(it0), first_leaf(it1));
            assert!(
                same_rows(g0.value(a), g1.value(b), |r| r % l == i),
                "condition of item {i} moved"
            );
        }
    }
}

/// Overwrites everything stored at padded rows with random content.
fn scramble(tree: &mut BatchTree, layout: &Layout, padded: &dyn Fn(usize) -> bool, rng: &mut impl Rng) {
    match (tree, layout) {
        (BatchTree::Leaf(xs), Layout::Categorical { cardinality }) => {
            for (r, x) in xs.iter_mut().enumerate() {
                if padded(r) {
                    *x = rng.random_range(0..*cardinality);
                }
            }
        }
        (BatchTree::Leaf(xs), Layout::Numerical(t)) => {
            for (r, x) in xs.iter_mut().enumerate() {
                if padded(r) {
                    *x = rng.random_range(0..t.len());
                }
            }
        }
        (BatchTree::Struct(xs), Layout::Struct(ls)) => {
            for (x, l) in xs.iter_mut().zip(ls) {
                scramble(x, l, padded, rng);
            }
        }
        (
            BatchTree::List {
                lengths,
                max_len,
                items,
            },
            Layout::List { item, .. },
        ) => {
            let l = *max_len;
            for (r, m) in lengths.iter_mut().enumerate() {
                if padded(r) {
                    *m = rng.random_range(0..=l);
                }
            }
            let lens = lengths.clone();
            // children of padded rows are padding too; so are rows past each length
            let inner = |r: usize| padded(r / l) || r % l >= lens[r / l];
            scramble(items, item, &inner, rng);
        }
        _ => unreachable!("layout mismatch"),
    }
}

pub fn loss_and_grads(tree: &CodecTree<f64>, store: &ParamStore<f64>, x: &BatchTree) -> (f64, Gradients<f64>) {
    let mut g = Graph::new(store);
    let l = tree.loss(&mut g, x, &mut Shuffle::Off).unwrap();
    (g.value(l).item(), g.backward(l).unwrap())
}

pub fn padding_never_reaches_loss_or_gradients(cases: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let set = rng.random_bool(0.3);
        let schema = random_list("root", 2, &mut rng, set);
        let cfg = small_cfg(&mut rng);
        let (tree, store) = build(&schema, cfg, &mut rng);
        let layout = tree.layout();
        let values: Vec<Value> = (0..5).map(|_| random_value(&layout, &mut rng)).collect();
        let x = layout.batch_values(&values).unwrap();
        let mut y = x.clone();
        let BatchTree::List { lengths, max_len, items } = &mut y else { unreachable!() };
        let Layout::List { item, .. } = &layout else { unreachable!() };
        let (lens, l) = (lengths.clone(), *max_len);
        scramble(items, item, &|r| r % l >= lens[r / l], &mut rng);
        y.validate().unwrap();

        let (a, ga) = loss_and_grads(&tree, &store, &x);
        let (b, gb) = loss_and_grads(&tree, &store, &y);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
    }
}

pub fn padded_item_embeddings_get_zero_gradient(cases: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TransformerConfig {
        width: 8,
        blocks: 2,
        heads: 2,
        init_std: 0.5,
    };
    for _ in 0..cases {
        let mut store = ParamStore::<f64>::new();
        let item = CategoricalCodec::new(&mut store, "xs/x", "x", 3, 8, 0.5, &mut rng).unwrap();
        let list = ListCodec::new(&mut store, "xs", "xs", 4, Box::new(item), &cfg, false, true, &mut rng).unwrap();
        let layout = Codec::<f64>::layout(&list);
        let values: Vec<Value> = (0..6).map(|_| random_value(&layout, &mut rng)).collect();
        let x = layout.batch_values(&values).unwrap();
        let BatchTree::List { lengths, .. } = &x else { unreachable!() };

        let mut g = Graph::new(&store);
        let (len_enc, item_enc) = list.encode_parts(&mut g, &x, &mut Shuffle::Off).unwrap();
        let enc = list.combine(&mut g, &len_enc, &item_enc, lengths, None).unwrap();
        let c = g.constant(Tensor::new(vec![6, 8], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let dist = list.decode(&mut g, c, &enc.context).unwrap();
        let loss = list.loss(&mut g, &dist, &x, &[1.0; 6]).unwrap();
        let grads = Tape::backward(&g, loss).unwrap();
        let ge = grads.get(item_enc.embedding).expect("items influence the loss");
        for (r, row) in (0..ge.rows()).map(|r| (r, ge.row(r))) {
            let (b, p) = (r / 4, r % 4);
            if p >= lengths[b] {
                assert!(row.iter().all(|&v| v == 0.0), "padded row {r} has gradient {row:?}");
            }
        }
        assert!(lengths.iter().any(|&m| m > 0) && ge.data().iter().any(|&v| v != 0.0));
    }
}

/// Copies every parameter of `from` into the same path of `to`.
pub fn copy_params(from: &ParamStore<f64>, to: &mut ParamStore<f64>) {
    for id in to.ids().collect::<Vec<_>>() {
        let path = to.path(id).to_string();
        *to.get_mut(id) = from.by_path(&path).unwrap_or_else(|| panic!("{path} missing")).clone();
    }
}

/// Summed loss of the plain struct with `schema`'s fields taken in `sigma`
/// order, on correspondingly reordered values, sharing `store`'s weights.
pub fn reordered_plain_loss(
    tree: &CodecTree<f64>,
    store: &ParamStore<f64>,
    schema: &SchemaNode,
    cfg: &TransformerConfig,
    sigma: &[usize],
    values: &[Value],
) -> f64 {
    let SchemaNode::Struct { fields, .. } = schema else { unreachable!() };
    let plain = SchemaNode::Struct {
        name: schema.name().into(),
        fields: sigma.iter().map(|&k| fields[k].clone()).collect(),
        shuffled: false,
    };
    let mut enc = Encodings::default();
    schema.walk(&mut |path, n| {
        if let SchemaNode::Numerical { .. } = n {
            let Layout::Numerical(t) = layout_at(&tree.layout(), schema, path) else { unreachable!() };
            enc.set_table(path, t);
        }
    });
    let opts = CompileOptions {
        transformer: cfg.clone(),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (ptree, mut pstore) = compile::<f64>(&plain, &enc, &opts, &mut rng).unwrap();
    copy_params(store, &mut pstore);
    let reordered: Vec<Value> = values
        .iter()
        .map(|v| {
            let Value::Struct(xs) = v else { unreachable!() };
            Value::Struct(sigma.iter().map(|&k| xs[k].clone()).collect())
        })
        .collect();
    let px = ptree.layout().batch_values(&reordered).unwrap();
    let mut g = Graph::inference(&pstore);
    let enc = ptree.root().encode(&mut g, &px, &mut Shuffle::Off).unwrap();
    let c = ptree.conditioning(&mut g, values.len()).unwrap();
    let dist = ptree.root().decode(&mut g, c, &enc.context).unwrap();
    let l = ptree.root().loss(&mut g, &dist, &px, &vec![1.0; values.len()]).unwrap();
    g.value(l).item()
}

pub fn shuffled_struct_matches_reordered_plain_struct(cases: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let shuffled = random_struct("root", 1, &mut rng, true);
        let SchemaNode::Struct { fields, .. } = &shuffled else { unreachable!() };
        let cfg = small_cfg(&mut rng);
        let (tree, store) = build(&shuffled, cfg.clone(), &mut rng);
        let values: Vec<Value> = (0..4).map(|_| random_value(&tree.layout(), &mut rng)).collect();
        let x = tree.layout().batch_values(&values).unwrap();

        let seed = rng.random::<u64>();
        let mut g = Graph::inference(&store);
        let c = tree.conditioning(&mut g, 4).unwrap();
        let mut pass_rng = ChaCha8Rng::seed_from_u64(seed);
        let l = tree.root().shuffled_loss(&mut g, c, &x, &[1.0; 4], 1, &mut pass_rng).unwrap();
        let shuffled_loss = g.value(l).item();

        // replay the draw: children are unshuffled, so only the order consumes randomness
        let sigma = Shuffle::Random(&mut ChaCha8Rng::seed_from_u64(seed)).permutation(fields.len());
        let plain_loss = reordered_plain_loss(&tree, &store, &shuffled, &cfg, &sigma, &values);
        assert_eq!(shuffled_loss.to_bits(), plain_loss.to_bits(), "σ = {sigma:?}");
    }
}

/// Layout of the node at `path`.
pub fn layout_at(layout: &Layout, schema: &SchemaNode, path: &str) -> Layout {
    let rest = path.strip_prefix(schema.name()).unwrap().trim_start_matches('/');
    if rest.is_empty() {
        return layout.clone();
    }
    let head = rest.split('/').next().unwrap();
    match (layout, schema) {
        (Layout::Struct(ls), SchemaNode::Struct { fields, .. }) => {
            let k = fields.iter().position(|f| f.name() == head).unwrap();
            layout_at(&ls[k], &fields[k], rest)
        }
        (Layout::List { item, .. }, SchemaNode::List { item: s, .. }) => layout_at(item, s, rest),
        _ => unreachable!(),
    }
}

pub fn set_matches_reordered_plain_list(cases: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TransformerConfig {
        width: 8,
        blocks: 2,
        heads: 2,
        init_std: 0.5,
    };
    for _ in 0..cases {
        let mut store = ParamStore::<f64>::new();
        let item = CategoricalCodec::new(&mut store, "xs/x", "x", 4, 8, 0.5, &mut rng).unwrap();
        let set = ListCodec::new(&mut store, "xs", "xs", 5, Box::new(item), &cfg, true, false, &mut rng).unwrap();
        let mut pstore = ParamStore::<f64>::new();
        let item = CategoricalCodec::new(&mut pstore, "xs/x", "x", 4, 8, 0.5, &mut rng).unwrap();
        let list = ListCodec::new(&mut pstore, "xs", "xs", 5, Box::new(item), &cfg, false, false, &mut rng).unwrap();
        copy_params(&store, &mut pstore);

        let layout = Codec::<f64>::layout(&set);
        let values: Vec<Value> = (0..5).map(|_| random_value(&layout, &mut rng)).collect();
        let x = layout.batch_values(&values).unwrap();
        let cond = Tensor::new(vec![5, 8], (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let seed = rng.random::<u64>();

        let mut g = Graph::inference(&store);
        let c = g.constant(cond.clone());
        let l = set.shuffled_loss(&mut g, c, &x, &[1.0; 5], 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let set_loss = g.value(l).item();

        let BatchTree::List { lengths, .. } = &x else { unreachable!() };
        let perms = set.draw_perms(lengths, &mut Shuffle::Random(&mut ChaCha8Rng::seed_from_u64(seed)));
        let reordered: Vec<Value> = values
            .iter()
            .zip(&perms)
            .map(|(v, p)| {
                let Value::List(xs) = v else { unreachable!() };
                Value::List(p.iter().map(|&j| xs[j].clone()).collect())
            })
            .collect();
        let px = layout.batch_values(&reordered).unwrap();
        let mut g = Graph::inference(&pstore);
        let c = g.constant(cond);
        let enc = list.encode(&mut g, &px, &mut Shuffle::Off).unwrap();
        let dist = list.decode(&mut g, c, &enc.context).unwrap();
        let l = list.loss(&mut g, &dist, &px, &[1.0; 5]).unwrap();
        assert_eq!(set_loss.to_bits(), g.value(l).item().to_bits());
    }
}

pub fn random_finite_schema(rng: &mut impl Rng) -> SchemaNode {
    loop {
        let n = rng.random_range(1..=3);
        let fields = (0..n)
            .map(|i| {
                let name = format!("f{i}");
                if rng.random_bool(0.3) {
                    SchemaNode::List {
                        name,
                        max_len: rng.random_range(1..=2),
                        item: Box::new(random_leaf("x", rng, true)),
                        shuffled: rng.random_bool(0.5),
                    }
                } else {
                    random_leaf(&name, rng, true)
                }
            })
            .collect();
        let s = SchemaNode::Struct {
            name: "root".into(),
            fields,
            shuffled: rng.random_bool(0.3),
        };
        // cap the joint domain at 12 outcomes
        let mut size = 1usize;
        let SchemaNode::Struct { fields, .. } = &s else { unreachable!() };
        for f in fields {
            size *= match f {
                SchemaNode::Categorical { cardinality, .. } => cardinality.unwrap(),
                SchemaNode::List { max_len, item, .. } => {
                    let SchemaNode::Categorical { cardinality, .. } = item.as_ref() else { unreachable!() };
                    let c = cardinality.unwrap();
                    (0..=*max_len).map(|m| c.pow(m as u32)).sum()
                }
                _ => unreachable!(),
            };
        }
        if size <= 12 {
            return s;
        }
    }
}

/// Also retrains each model for `train_steps` full-batch Adam steps on
/// random data and checks again.
pub fn enumerated_joint_sums_to_one(cases: usize, seed: u64, train_steps: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let schema = random_finite_schema(&mut rng);
        let cfg = small_cfg(&mut rng);
        let (tree, mut store) = build(&schema, cfg, &mut rng);
        let total = |store: &ParamStore<f64>| {
            let joint = tree.enumerate_joint(store, 12).unwrap().unwrap();
            joint.iter().map(|(_, p)| p).sum::<f64>()
        };
        let before = total(&store);
        assert!((before - 1.0).abs() < 1e-9, "{before} for {schema:?}");
        if train_steps == 0 {
            continue;
        }
        let values: Vec<Value> = (0..64).map(|_| random_value(&tree.layout(), &mut rng)).collect();
        let x = tree.layout().batch_values(&values).unwrap();
        let train = crate::trainer::TrainConfig {
            epochs: train_steps,
            batch_size: values.len(),
            lr: 0.05,
            seed: rng.random(),
            ..Default::default()
        };
        crate::trainer::fit(&tree, &mut store, &x, &train, None, &mut |_| {}).unwrap();
        let after = total(&store);
        assert!((after - 1.0).abs() < 1e-9, "{after} after training {schema:?}");
    }
}

pub fn sampler_follows_the_model_joint(cases: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let schema = random_finite_schema(&mut rng);
        let cfg = small_cfg(&mut rng);
        let (tree, store) = build(&schema, cfg, &mut rng);
        let joint = tree.enumerate_joint(&store, 12).unwrap().unwrap();
        let n = 40_000;
        let samples = tree.sample(&store, n, &mut rng).unwrap();
        let tvd: f64 = joint
            .iter()
            .map(|(v, p)| {
                let freq = samples.iter().filter(|s| *s == v).count() as f64 / n as f64;
                (freq - p).abs()
            })
            .sum::<f64>()
            / 2.0;
        assert!(tvd < 0.02, "TVD {tvd} for {schema:?}");
    }
}

pub fn samples_conform_to_the_layout(cases: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let shuffled = rng.random_bool(0.5);
        let schema = random_struct("root", 2, &mut rng, shuffled);
        let cfg = small_cfg(&mut rng);
        let (tree, store) = build(&schema, cfg, &mut rng);
        let samples = tree.sample(&store, 50, &mut rng).unwrap();
        assert_eq!(samples.len(), 50);
        // batching validates cardinalities and list lengths
        let x = tree.layout().batch_values(&samples).unwrap();
        x.validate().unwrap();
        assert!(tree.log_likelihood(&store, &samples[..3]).unwrap().iter().all(|l| l.is_finite()));
    }
}

/// Relative error is taken against `max(|ad|, |fd|, floor)`, where the floor
/// is the smallest derivative a central difference at step `h` resolves
/// to 1e-4 given rounding in the loss (a few ulps of `|L|` over `h`).
pub fn fd_check(tree: &CodecTree<f64>, store: &ParamStore<f64>, x: &BatchTree, rng: &mut impl Rng, coords: usize) {
    let (loss, grads) = loss_and_grads(tree, store, x);
    let h = 1e-5;
    let floor = (4.0 * f64::EPSILON * loss.abs().max(1.0) / h / 1e-4).max(1e-6);
    for id in store.ids() {
        let len = store.get(id).len();
        for _ in 0..coords.min(len) {
            let i = rng.random_range(0..len);
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += delta;
                let mut g = Graph::inference(&s);
                let l = tree.loss(&mut g, x, &mut Shuffle::Off).unwrap();
                g.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let ad = grads.get(id).data()[i];
            let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor);
            assert!(err < 1e-4, "{} [{i}]: autodiff {ad} vs fd {fd}", store.path(id));
        }
    }
}

/// Transformer shapes over the full range: widths 8 to 64, 1 to 8 heads.
pub fn wide_cfg(rng: &mut ChaCha8Rng) -> TransformerConfig {
    let heads = [1, 2, 4, 8][rng.random_range(0..4)];
    let width = loop {
        let w = heads * rng.random_range(1..=64 / heads);
        if w >= 8 {
            break w;
        }
    };
    TransformerConfig {
        width,
        blocks: rng.random_range(1..=2),
        heads,
        init_std: 1.0 / (width as f64).sqrt(),
    }
}

pub fn codec_gradients_match_finite_differences(cases: usize, seed: u64, cfg: fn(&mut ChaCha8Rng) -> TransformerConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let schema = if rng.random_bool(0.5) {
            random_struct("root", 2, &mut rng, false)
        } else {
            random_list("root", 2, &mut rng, false)
        };
        let cfg = cfg(&mut rng);
        let (tree, store) = build(&schema, cfg, &mut rng);
        let values: Vec<Value> = (0..3).map(|_| random_value(&tree.layout(), &mut rng)).collect();
        let x = tree.layout().batch_values(&values).unwrap();
        fd_check(&tree, &store, &x, &mut rng, 6);
    }
}

