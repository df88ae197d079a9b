//! Acceptance suite: every criterion runs at its stated tolerance and
//! prints one PASS/FAIL line. Runs without the libtest harness so the
//! lines always reach the output; exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nestgen::codec::checks;
use nestgen::codec::{CodecTree, Shuffle, Value};
use nestgen::data::{ingest_records, Dataset};
use nestgen::metrics::{evaluate, marginal_score, wasserstein_1d, Column, ColumnData, EvalOptions, Table};
use nestgen::model::Model;
use nestgen::rng::{derive, streams};
use nestgen::schema::{CompileOptions, SchemaNode};
use nestgen::tensor::{Gradients, Graph, ParamStore, Tensor, TransformerConfig};
use nestgen::trainer::{self, clip, dp_step, DpConfig, TrainConfig};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde_json::{json, Value as Json};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, format!("took {took:.1?}, limit {limit:?}"))
}

fn tvd(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn normalize(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / total).collect()
}

fn model_for(
    records: Vec<Json>,
    schema: &SchemaNode,
    t: TransformerConfig,
    seed: u64,
) -> (Dataset, CodecTree<f64>, ParamStore<f64>) {
    let data = ingest_records(records, schema).expect("fixture conforms");
    let opts = CompileOptions {
        transformer: t,
        ..Default::default()
    };
    let (model, tree) = Model::init(schema.clone(), data.encodings.clone(), opts, seed).unwrap();
    (data, tree, model.params)
}

fn full_loss(tree: &CodecTree<f64>, store: &ParamStore<f64>, data: &Dataset) -> f64 {
    let mut g = Graph::inference(store);
    let l = tree.loss(&mut g, &data.batch, &mut Shuffle::Off).unwrap();
    g.value(l).item()
}

fn gradient_oracle() -> Check {
    let start = Instant::now();
    checks::codec_gradients_match_finite_differences(20, 101, checks::wide_cfg);
    within(start, Duration::from_secs(120))?;
    Ok("20 configurations, widths 8-64, 1-8 heads, rel err < 1e-4".into())
}

fn normalization() -> Check {
    checks::enumerated_joint_sums_to_one(10, 102, 50);
    Ok("10 schemas, |Σp − 1| < 1e-9 before and after 50 training steps".into())
}

fn joint_recovery() -> Check {
    let start = Instant::now();
    let schema = SchemaNode::parse(
        r#"{"type":"record","name":"pair","fields":[{"name":"a","type":"enum"},{"name":"b","type":"enum"}]}"#,
    )
    .unwrap();
    let target: [(&str, &str, f64); 4] = [("0", "0", 0.4), ("0", "1", 0.1), ("1", "0", 0.1), ("1", "1", 0.4)];
    let mut records = vec![];
    for (a, b, p) in target {
        for _ in 0..(p * 1000.0) as usize {
            records.push(json!({"a": a, "b": b}));
        }
    }
    let entropy: f64 = -target.iter().map(|(_, _, p)| p * p.ln()).sum::<f64>();
    let t = TransformerConfig {
        width: 16,
        blocks: 1,
        heads: 2,
        init_std: 0.3,
    };
    let (data, tree, mut store) = model_for(records, &schema, t, 7);
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 250,
        lr: 1e-2,
        seed: 7,
        ..Default::default()
    };
    let report = trainer::fit(&tree, &mut store, &data.batch, &cfg, None, &mut |_| {}).map_err(|e| e.to_string())?;
    ensure(report.steps == 2000, format!("{} steps", report.steps))?;
    let loss = full_loss(&tree, &store, &data);
    ensure(
        (loss - entropy).abs() < 0.01,
        format!("loss {loss:.5} vs entropy {entropy:.5}"),
    )?;

    let joint = tree.enumerate_joint(&store, 16).unwrap().unwrap();
    let n = 200_000;
    let samples = tree.sample(&store, n, &mut derive(7, streams::SAMPLE)).unwrap();
    let p: Vec<f64> = joint.iter().map(|(_, p)| *p).collect();
    let q: Vec<f64> = joint
        .iter()
        .map(|(v, _)| samples.iter().filter(|s| *s == v).count() as f64 / n as f64)
        .collect();
    let d = tvd(&p, &q);
    ensure(d < 0.02, format!("sample TVD {d:.4}"))?;
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "loss {loss:.5} vs analytic entropy {entropy:.5}; 200k-sample TVD {d:.4}"
    ))
}

const LENGTHS: [(usize, f64); 3] = [(1, 0.2), (4, 0.5), (8, 0.3)];
const INIT: [f64; 3] = [0.6, 0.3, 0.1];
const CHAIN: [[f64; 3]; 3] = [[0.1, 0.8, 0.1], [0.2, 0.2, 0.6], [0.7, 0.2, 0.1]];
const SYMBOLS: [&str; 3] = ["a", "b", "c"];

fn markov_list(rng: &mut impl Rng) -> Vec<usize> {
    let len = LENGTHS[WeightedIndex::new(LENGTHS.map(|l| l.1)).unwrap().sample(rng)].0;
    let mut xs = vec![WeightedIndex::new(INIT).unwrap().sample(rng)];
    while xs.len() < len {
        let prev = *xs.last().unwrap();
        xs.push(WeightedIndex::new(CHAIN[prev]).unwrap().sample(rng));
    }
    xs
}

/// Expected bigram frequencies under the generator.
fn generator_bigrams() -> Vec<f64> {
    let mut expected = vec![0.0; 9];
    for (len, pl) in LENGTHS {
        let mut marginal = INIT;
        for _ in 1..len {
            let mut next = [0.0; 3];
            for a in 0..3 {
                for b in 0..3 {
                    expected[a * 3 + b] += pl * marginal[a] * CHAIN[a][b];
                    next[b] += marginal[a] * CHAIN[a][b];
                }
            }
            marginal = next;
        }
    }
    normalize(&expected)
}

fn list_recovery() -> Check {
    let schema = SchemaNode::parse(
        r#"{"type":"record","name":"seq","fields":[{"name":"xs","type":"array","max_len":8,
            "items":{"type":"enum","name":"x","symbols":["a","b","c"]}}]}"#,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let records: Vec<Json> = (0..4000)
        .map(|_| json!({"xs": markov_list(&mut rng).iter().map(|&i| SYMBOLS[i]).collect::<Vec<_>>()}))
        .collect();
    let t = TransformerConfig {
        width: 16,
        blocks: 2,
        heads: 2,
        init_std: 0.2,
    };
    let (data, tree, mut store) = model_for(records, &schema, t, 104);
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 200,
        lr: 1e-2,
        seed: 104,
        ..Default::default()
    };
    trainer::fit(&tree, &mut store, &data.batch, &cfg, None, &mut |_| {}).map_err(|e| e.to_string())?;

    let n = 100_000;
    let samples = tree.sample(&store, n, &mut derive(104, streams::SAMPLE)).unwrap();
    let mut lengths = vec![0.0; 9];
    let mut bigrams = vec![0.0; 9];
    for s in &samples {
        let Value::Struct(fields) = s else { unreachable!() };
        let Value::List(items) = &fields[0] else { unreachable!() };
        lengths[items.len()] += 1.0;
        let idx: Vec<usize> = items
            .iter()
            .map(|v| match v {
                Value::Cat(i) => *i,
                _ => unreachable!(),
            })
            .collect();
        for w in idx.windows(2) {
            bigrams[w[0] * 3 + w[1]] += 1.0;
        }
    }
    let mut target_len = vec![0.0; 9];
    for (l, p) in LENGTHS {
        target_len[l] = p;
    }
    let dl = tvd(&normalize(&lengths), &target_len);
    let db = tvd(&normalize(&bigrams), &generator_bigrams());
    ensure(dl < 0.03 && db < 0.05, format!("length TVD {dl:.4}, bigram TVD {db:.4}"))?;
    Ok(format!("length TVD {dl:.4} (< 0.03), bigram TVD {db:.4} (< 0.05), 100k samples"))
}

fn causality() -> Check {
    checks::struct_fields_ignore_later_fields(50, 105);
    checks::list_length_and_items_ignore_the_future(50, 106);
    Ok("50 struct and 50 list schemas, bitwise".into())
}

fn masking() -> Check {
    checks::padding_never_reaches_loss_or_gradients(50, 107);
    checks::padded_item_embeddings_get_zero_gradient(50, 108);
    Ok("50 random batches each: padding changes nothing, padded rows get zero gradient".into())
}

fn shuffle_soundness() -> Check {
    checks::shuffled_struct_matches_reordered_plain_struct(50, 109);
    checks::set_matches_reordered_plain_list(50, 110);
    Ok("50 shuffled structs and 50 sets, bitwise".into())
}

fn dp_store(dims: &[usize]) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    for (i, &d) in dims.iter().enumerate() {
        store.insert(format!("p{i}"), Tensor::zeros(&[1, d])).unwrap();
    }
    store
}

fn dp() -> Check {
    let c = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let store = dp_store(&[7, 13, 40]);
    let ids: Vec<_> = store.ids().collect();
    let no_noise = DpConfig {
        enabled: true,
        clip_norm: c,
        noise_multiplier: 0.0,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let mut g = Gradients::zeros_like(&store);
        let scale = 10f64.powf(rng.random_range(-6.0..2.0));
        for &id in &ids {
            for v in g.get_mut(id).data_mut() {
                *v = scale * rng.random_range(-1.0..1.0);
            }
        }
        let clipped = clip(&g, c).norm();
        let stepped = dp_step(std::slice::from_ref(&g), &no_noise, &mut rng).unwrap().norm();
        worst = worst.max(clipped).max(stepped);
        ensure(clipped <= c + 1e-9 && stepped <= c + 1e-9, format!("norm {clipped} / {stepped}"))?;
    }

    let (sigma, batch) = (1.08, 1024);
    let store = dp_store(&[98]);
    let per_example: Vec<Gradients<f64>> = (0..batch).map(|_| Gradients::zeros_like(&store)).collect();
    let noisy = DpConfig {
        enabled: true,
        clip_norm: c,
        noise_multiplier: sigma,
    };
    let mut draws = vec![];
    while draws.len() < 100_000 {
        draws.extend(dp_step(&per_example, &noisy, &mut rng).unwrap().flatten());
    }
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let std = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let expected = sigma * c / batch as f64;
    let rel = (std - expected).abs() / expected;
    ensure(rel < 0.05, format!("noise std {std:.4e} vs {expected:.4e}"))?;
    Ok(format!(
        "max clipped norm {worst:.6e} ≤ C + 1e-9 over 10k gradients; noise std {std:.4e} vs σC/B {expected:.4e} ({:.2}% off, {} draws)",
        rel * 100.0,
        draws.len()
    ))
}

fn metrics_identities() -> Check {
    let schema = SchemaNode::parse(
        r#"{"type":"record","name":"mixed","fields":[
            {"name":"c1","type":"enum"},{"name":"c2","type":"enum"},{"name":"c3","type":"enum"},
            {"name":"n1","type":"float"},{"name":"n2","type":"float"},{"name":"n3","type":"int"}]}"#,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let records: Vec<Json> = (0..1000)
        .map(|_| {
            let c1 = rng.random_range(0..3);
            let n1: f64 = normal.sample(&mut rng) + c1 as f64;
            json!({
                "c1": format!("k{c1}"),
                "c2": if rng.random_bool(0.3) { "x" } else { "y" },
                "c3": format!("z{}", rng.random_range(0..6)),
                "n1": n1,
                "n2": n1 * 2.0 + normal.sample(&mut rng),
                "n3": rng.random_range(0..50),
            })
        })
        .collect();
    let report = evaluate(
        &schema,
        &records,
        &records,
        &EvalOptions::default(),
        None,
        &mut derive(112, streams::METRICS),
    )
    .map_err(|e| e.to_string())?;
    for c in &report.columns {
        for d in [c.wasserstein, c.wasserstein_normalized, c.js_distance, c.js_divergence].into_iter().flatten() {
            ensure(d == 0.0, format!("{}: distance {d}", c.column))?;
        }
    }
    ensure(report.columns.len() == 6, "six column reports")?;
    ensure(report.correlation_diff == Some(0.0), format!("corr diff {:?}", report.correlation_diff))?;
    ensure(report.marginal_score == Some(1000.0), format!("score {:?}", report.marginal_score))?;

    let col = |name: &str, xs: &[&str]| Column {
        name: name.into(),
        data: ColumnData::Categorical(xs.iter().map(|s| s.to_string()).collect()),
        inherited: false,
    };
    let uniform = Table {
        name: "t".into(),
        columns: vec![col("u", &["0", "0", "1", "1"]), col("v", &["0", "1", "0", "1"])],
    };
    let diagonal = Table {
        name: "t".into(),
        columns: vec![col("u", &["0", "1"]), col("v", &["0", "1"])],
    };
    let m = marginal_score(&uniform, &diagonal, 2, 1, &mut derive(0, streams::METRICS)).map_err(|e| e.to_string())?;
    ensure(m.score == 500.0, format!("hand example score {}", m.score))?;
    let w = wasserstein_1d(&[0.0, 1.0], &[0.0, 2.0], false).map_err(|e| e.to_string())?;
    ensure(w == 0.5, format!("wasserstein example {w}"))?;
    Ok("eval(X, X) on 1k mixed rows: all distances 0, score 1000; hand marginal 500; W1 0.5".into())
}

fn users_fixture(n: usize, seed: u64) -> Vec<Json> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let places = ["cinema", "grocer", "restaurant"];
    let by_sex = [[0.2, 0.5, 0.3], [0.5, 0.2, 0.3]];
    let price_mu: [f64; 3] = [2.3, 3.0, 3.5];
    (0..n)
        .map(|_| {
            let sex = rng.random_range(0..2);
            let age: f64 = rng.random_range(18.0..80.0);
            let k = if age < 40.0 { rng.random_range(1..=4) } else { rng.random_range(0..=2) };
            let tx: Vec<Json> = (0..k)
                .map(|_| {
                    let p = WeightedIndex::new(by_sex[sex]).unwrap().sample(&mut rng);
                    let price = Normal::new(price_mu[p], 0.1).unwrap().sample(&mut rng).exp();
                    json!({"Place": places[p], "Price": (price * 100.0).round() / 100.0})
                })
                .collect();
            json!({"Age": (age * 10.0).round() / 10.0, "Sex": (["F", "M"][sex]), "transactions": tx})
        })
        .collect()
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_nestgen"))
        .args(args)
        .env("NESTGEN_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn end_to_end() -> Check {
    let start = Instant::now();
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let p = |f: &str| dir.path().join(f);
    let s = |path: &Path| path.to_str().unwrap().to_string();
    std::fs::write(
        p("schema.json"),
        r#"{"type":"record","name":"User","fields":[
            {"name":"Age","type":"float"},{"name":"Sex","type":"enum"},
            {"name":"transactions","type":"array","max_len":4,"items":{"type":"record","name":"transaction",
              "fields":[{"name":"Place","type":"enum"},{"name":"Price","type":"float"}]}}]}"#,
    )
    .unwrap();
    let lines: Vec<String> = users_fixture(5000, 113).iter().map(|r| r.to_string()).collect();
    std::fs::write(p("users.jsonl"), lines.join("\n") + "\n").unwrap();

    let (schema, data, model, synth, report) = (
        s(&p("schema.json")),
        s(&p("users.jsonl")),
        s(&p("model.json")),
        s(&p("synth.jsonl")),
        s(&p("report.json")),
    );
    run_cli(&[
        "fit", "--schema", &schema, "--data", &data, "--out", &model, "--width", "32", "--blocks", "2", "--heads",
        "4", "--epochs", "20", "--batch-size", "100", "--lr", "3e-3", "--init-std", "0.1", "--seed", "113",
    ])?;
    let params = Model::load(&p("model.json")).map_err(|e| e.to_string())?.params.count();
    ensure(params <= 200_000, format!("{params} parameters"))?;
    run_cli(&["sample", "--model", &model, "--count", "5000", "--out", &synth, "--seed", "113"])?;
    run_cli(&["eval", "--schema", &schema, "--data", &data, "--synth", &synth, "--out", &report, "--seed", "113"])?;
    let r: Json = serde_json::from_str(&std::fs::read_to_string(p("report.json")).unwrap()).unwrap();
    let score = r["marginal_score"].as_f64().ok_or("no marginal score")?;
    let took = start.elapsed();
    ensure(score >= 900.0, format!("marginal score {score:.1}"))?;
    within(start, Duration::from_secs(300))?;
    Ok(format!("{params} parameters, marginal score {score:.1} (≥ 900), {took:.0?} total"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient oracle", gradient_oracle),
        ("chain-rule normalization", normalization),
        ("joint-distribution recovery", joint_recovery),
        ("list recovery", list_recovery),
        ("causality", causality),
        ("masking", masking),
        ("shuffle soundness", shuffle_soundness),
        ("DP clipping and noise", dp),
        ("metrics identities", metrics_identities),
        ("end-to-end smoke", end_to_end),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(panic) => Err(panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance {:>2} {name}: PASS ({secs:.1}s) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("acceptance {:>2} {name}: FAIL ({secs:.1}s) {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
