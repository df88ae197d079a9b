//! Mini-batch training with optional shuffle passes and DP-SGD.

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::CodecTree;
use crate::data::BatchTree;
use crate::error::{Error, Result};
use crate::rng::{derive, streams};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, OptimizerKind, OptimizerState, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Permutations per batch for shuffled nodes.
    pub shuffle_passes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 512,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            shuffle_passes: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.shuffle_passes == 0 {
            return Err(Error::Config("shuffle passes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-example clipping and Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub enabled: bool,
    /// Clipping threshold `C`.
    pub clip_norm: f64,
    /// Noise multiplier `σ`.
    pub noise_multiplier: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            clip_norm: 1e-3,
            noise_multiplier: 1.08,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier.is_finite() && self.noise_multiplier >= 0.0) {
            return Err(Error::Config(format!(
                "noise multiplier must be non-negative, got {}",
                self.noise_multiplier
            )));
        }
        Ok(())
    }
}

/// `g · min(1, C/‖g‖)`.
pub fn clip<F: Scalar>(g: &Gradients<F>, clip_norm: f64) -> Gradients<F> {
    let norm = g.norm().as_f64();
    let mut out = g.clone();
    if norm > clip_norm {
        out.scale(F::lit(clip_norm / norm));
    }
    out
}

/// Clips each example's gradient, averages, and adds `N(0, (σC/B)²)` noise
/// to every coordinate.
pub fn dp_step<F: Scalar>(per_example: &[Gradients<F>], dp: &DpConfig, rng: &mut dyn RngCore) -> Result<Gradients<F>> {
    dp.validate()?;
    let b = per_example.len();
    let Some(first) = per_example.first() else {
        return Err(Error::Config("DP step needs at least one example".into()));
    };
    let mut total = first.zeros_matching();
    for g in per_example {
        total.add_assign(&clip(g, dp.clip_norm));
    }
    total.scale(F::one() / F::from_usize_lossy(b));
    let std = dp.noise_multiplier * dp.clip_norm / b as f64;
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut flat = total.flatten();
        for v in &mut flat {
            *v += F::lit(normal.sample(rng));
        }
        total = total.with_flat(&flat)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpRecord {
    #[serde(rename = "C")]
    pub clip_norm: f64,
    pub sigma: f64,
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub dp: Option<DpRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<BatchRecord>,
    /// Mean batch loss per epoch.
    pub epoch_means: Vec<f64>,
    pub steps: u64,
}

/// Trains `store` in place on `data`.
///
/// `on_batch` sees every run-log record as it is produced.
pub fn fit<F: Scalar>(
    tree: &CodecTree<F>,
    store: &mut ParamStore<F>,
    data: &BatchTree,
    cfg: &TrainConfig,
    dp: Option<&DpConfig>,
    on_batch: &mut dyn FnMut(&BatchRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let dp = dp.filter(|d| d.enabled);
    if let Some(d) = dp {
        d.validate()?;
    }
    data.validate()?;
    let n = data.rows();
    if n == 0 {
        return Err(Error::Data("no training rows".into()));
    }
    if cfg.shuffle_passes > 1 && !tree.root().has_shuffle() {
        return Err(Error::Config(format!(
            "{} shuffle passes requested but the schema has no shuffled node",
            cfg.shuffle_passes
        )));
    }
    let mut order_rng = derive(cfg.seed, streams::BATCH_ORDER);
    let mut shuffle_rng = derive(cfg.seed, streams::SHUFFLE);
    let mut noise_rng = derive(cfg.seed, streams::DP_NOISE);
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr, store);
    let mut report = TrainReport::default();
    let mut rows: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        rows.shuffle(&mut order_rng);
        let mut epoch_total = 0.0;
        let mut batches = 0;
        for (b, chunk) in rows.chunks(cfg.batch_size).enumerate() {
            let batch = data.select_rows(chunk)?;
            let located = |e: Error| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            };
            let (loss, grads) = match dp {
                None => {
                    let (l, g) = tree
                        .train_step(store, &batch, cfg.shuffle_passes, &mut shuffle_rng)
                        .map_err(located)?;
                    (l.as_f64(), g)
                }
                Some(d) => {
                    let mut per_example = Vec::with_capacity(chunk.len());
                    let mut total = 0.0;
                    for r in 0..chunk.len() {
                        let one = batch.select_rows(&[r])?;
                        let (l, g) = tree
                            .train_step(store, &one, cfg.shuffle_passes, &mut shuffle_rng)
                            .map_err(located)?;
                        total += l.as_f64();
                        per_example.push(g);
                    }
                    let g = dp_step(&per_example, d, &mut noise_rng)?;
                    (total / chunk.len() as f64, g)
                }
            };
            let grad_norm = grads.norm().as_f64();
            opt.step(store, &grads).map_err(located)?;
            let record = BatchRecord {
                epoch,
                batch: b,
                loss,
                grad_norm,
                dp: dp.map(|d| DpRecord {
                    clip_norm: d.clip_norm,
                    sigma: d.noise_multiplier,
                }),
            };
            on_batch(&record);
            report.history.push(record);
            epoch_total += loss;
            batches += 1;
        }
        let mean = epoch_total / batches as f64;
        log::info!("epoch {epoch}: mean loss {mean:.5}");
        report.epoch_means.push(mean);
    }
    report.steps = opt.step;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::codec::Value;
    use crate::data::Encodings;
    use crate::schema::{compile, CompileOptions, SchemaNode};
    use crate::tensor::{Tensor, TransformerConfig};

    fn two_binary() -> (CodecTree<f64>, ParamStore<f64>) {
        let s = SchemaNode::parse(
            r#"{"type":"record","name":"r","fields":[
                {"name":"a","type":"enum","cardinality":2},{"name":"b","type":"enum","cardinality":2}]}"#,
        )
        .unwrap();
        let opts = CompileOptions {
            transformer: TransformerConfig {
                width: 16,
                blocks: 1,
                heads: 2,
                init_std: 0.1,
            },
            ..Default::default()
        };
        compile(&s, &Encodings::default(), &opts, &mut derive(3, streams::INIT)).unwrap()
    }

    /// 1000 rows from the joint 0.4/0.1/0.1/0.4, exact proportions.
    fn correlated(tree: &CodecTree<f64>) -> BatchTree {
        let mut values = vec![];
        for (a, b, count) in [(0, 0, 400), (0, 1, 100), (1, 0, 100), (1, 1, 400)] {
            values.extend((0..count).map(|_| Value::Struct(vec![Value::Cat(a), Value::Cat(b)])));
        }
        tree.layout().batch_values(&values).unwrap()
    }

    fn entropy(p: &[f64]) -> f64 {
        -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
    }

    #[test]
    fn correlated_pair_reaches_joint_entropy() {
        let (tree, mut store) = two_binary();
        let data = correlated(&tree);
        let cfg = TrainConfig {
            epochs: 500,
            batch_size: 250,
            lr: 1e-2,
            ..Default::default()
        };
        let report = fit(&tree, &mut store, &data, &cfg, None, &mut |_| {}).unwrap();
        assert_eq!(report.history.len(), 500 * 4);
        let h = entropy(&[0.4, 0.1, 0.1, 0.4]);
        let last = *report.epoch_means.last().unwrap();
        assert!(last >= h - 0.02, "{last} below entropy {h}");
        assert!(last - h < 0.01, "final loss {last}, entropy {h}");
        assert!(last < report.epoch_means[0]);
    }

    #[test]
    fn one_category_root_never_moves() {
        let s = SchemaNode::parse(r#"{"type":"enum","name":"x","cardinality":1}"#).unwrap();
        let (tree, mut store) = compile::<f64>(&s, &Encodings::default(), &CompileOptions::default(), &mut derive(0, 1)).unwrap();
        let before = store.clone();
        let data = BatchTree::Leaf(vec![0; 10]);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let report = fit(&tree, &mut store, &data, &cfg, None, &mut |_| {}).unwrap();
        assert!(report.history.iter().all(|r| r.loss == 0.0));
        for id in store.ids() {
            assert_eq!(store.get(id), before.get(id));
        }
    }

    #[test]
    fn same_seed_same_history() {
        let run = || {
            let (tree, mut store) = two_binary();
            let data = correlated(&tree);
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 64,
                seed: 9,
                ..Default::default()
            };
            let r = fit(&tree, &mut store, &data, &cfg, None, &mut |_| {}).unwrap();
            (r.history.iter().map(|h| h.loss.to_bits()).collect::<Vec<_>>(), store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        for id in sa.ids() {
            assert_eq!(sa.get(id), sb.get(id));
        }
    }

    #[test]
    fn disabled_dp_is_ignored() {
        let run = |dp: Option<&DpConfig>| {
            let (tree, mut store) = two_binary();
            let data = correlated(&tree);
            let cfg = TrainConfig {
                epochs: 1,
                batch_size: 128,
                ..Default::default()
            };
            fit(&tree, &mut store, &data, &cfg, dp, &mut |_| {}).unwrap().history
        };
        let off = DpConfig {
            enabled: false,
            clip_norm: 123.0,
            noise_multiplier: 9.0,
        };
        assert_eq!(run(None), run(Some(&off)));
    }

    #[test]
    fn dp_run_logs_its_parameters() {
        let (tree, mut store) = two_binary();
        let data = correlated(&tree).select_rows(&(0..40).collect::<Vec<_>>()).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..Default::default()
        };
        let dp = DpConfig {
            enabled: true,
            clip_norm: 1e-3,
            noise_multiplier: 1.08,
        };
        let mut lines = vec![];
        let report = fit(&tree, &mut store, &data, &cfg, Some(&dp), &mut |r| {
            lines.push(serde_json::to_string(r).unwrap())
        })
        .unwrap();
        assert_eq!(report.history.len(), 3);
        assert!(lines[0].contains(r#""dp":{"C":0.001,"sigma":1.08}"#), "{}", lines[0]);
    }

    #[test]
    fn configuration_errors() {
        let (tree, mut store) = two_binary();
        let data = correlated(&tree);
        for cfg in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { shuffle_passes: 2, ..Default::default() },
        ] {
            assert!(fit(&tree, &mut store, &data, &cfg, None, &mut |_| {}).is_err());
        }
        let bad = DpConfig {
            enabled: true,
            clip_norm: 0.0,
            noise_multiplier: 1.0,
        };
        assert!(fit(&tree, &mut store, &data, &TrainConfig::default(), Some(&bad), &mut |_| {}).is_err());
    }

    fn grads_from(values: Vec<Vec<f64>>) -> Vec<Gradients<f64>> {
        values
            .into_iter()
            .map(|v| {
                let mut store = ParamStore::<f64>::new();
                store.insert("p", Tensor::new(vec![v.len()], v.clone()).unwrap()).unwrap();
                Gradients::zeros_like(&store).with_flat(&v).unwrap()
            })
            .collect()
    }

    #[test]
    fn small_gradients_pass_through() {
        let gs = grads_from(vec![vec![1e-4, -2e-4], vec![3e-4, 0.0]]);
        let dp = DpConfig {
            enabled: true,
            clip_norm: 1e-3,
            noise_multiplier: 0.0,
        };
        let out = dp_step(&gs, &dp, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.flatten(), vec![(1e-4 + 3e-4) / 2.0, -1e-4]);
    }

    #[test]
    fn large_gradient_is_clipped_to_c() {
        let c = 1e-3;
        let g = grads_from(vec![vec![6e-3, 8e-3]]);
        assert!((g[0].norm() - 10.0 * c).abs() < 1e-15);
        let clipped = clip(&g[0], c);
        assert!((clipped.norm() - c).abs() < 1e-9);
    }

    #[test]
    fn noise_has_the_calibrated_spread() {
        let (batch, dims) = (1024, 98);
        let gs = grads_from(vec![vec![0.0; dims]; batch]);
        let dp = DpConfig {
            enabled: true,
            clip_norm: 1e-3,
            noise_multiplier: 1.08,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // 10^5 noise draws over repeated steps
        let out: Vec<f64> = (0..100_000 / dims + 1)
            .flat_map(|_| dp_step(&gs, &dp, &mut rng).unwrap().flatten())
            .collect();
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = 1.08e-3 / batch as f64;
        assert!((std / target - 1.0).abs() < 0.05, "{std} vs {target}");
    }

    proptest! {
        #[test]
        fn clipping_bounds_every_contribution(
            v in prop::collection::vec(-10.0f64..10.0, 1..40),
            c in 1e-4f64..10.0,
        ) {
            let g = &grads_from(vec![v])[0];
            let clipped = clip(g, c);
            prop_assert!(clipped.norm() <= c + 1e-9);
            if g.norm() <= c {
                prop_assert_eq!(&clipped, g);
            }
        }
    }

    #[test]
    fn batches_use_random_subsets() {
        let (tree, mut store) = two_binary();
        let data = correlated(&tree);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 300,
            ..Default::default()
        };
        let r = fit(&tree, &mut store, &data, &cfg, None, &mut |_| {}).unwrap();
        // ceil(1000 / 300)
        assert_eq!(r.history.len(), 4);
        assert_eq!(r.history.iter().map(|h| h.batch).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }
}
