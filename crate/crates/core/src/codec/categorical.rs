use rand::{Rng, RngCore};

use super::{Codec, CodecKind, Context, DistRep, Encoded, Sampled, Shuffle, Value};
use crate::data::{BatchTree, Layout};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax, Graph, NodeId, ParamId, ParamStore, Tensor};

/// Inverse-CDF draw from `probs` with one uniform `u ∈ [0, 1)`.
pub fn sample_index<F: Scalar>(probs: &[F], u: f64) -> usize {
    let mut cum = 0.0;
    for (k, p) in probs.iter().enumerate() {
        cum += p.as_f64();
        if u < cum {
            return k;
        }
    }
    // rounding left the total just under one
    probs.iter().rposition(|p| *p > F::zero()).unwrap_or(0)
}

/// Categorical codec over `n` categories, parametrized by `W[n, d]`.
///
/// Encoding is a row lookup and decoding projects onto the same rows, so
/// `logits = c · Wᵀ`.
#[derive(Clone, Debug)]
pub struct CategoricalCodec {
    name: String,
    cardinality: usize,
    weight: ParamId,
}

impl CategoricalCodec {
    /// Registers `{path}/W`.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        path: &str,
        name: &str,
        cardinality: usize,
        width: usize,
        init_std: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if cardinality == 0 {
            return Err(Error::Schema(format!("{name}: cardinality must be at least 1")));
        }
        let weight = store.insert_normal(format!("{path}/W"), &[cardinality, width], init_std, rng)?;
        Ok(Self {
            name: name.to_string(),
            cardinality,
            weight,
        })
    }

    pub fn cardinality(&self) -> usize {
        self.cardinality
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub(crate) fn leaf<'a>(&self, x: &'a BatchTree) -> Result<&'a [usize]> {
        match x {
            BatchTree::Leaf(v) => {
                if let Some(&k) = v.iter().find(|&&k| k >= self.cardinality) {
                    return Err(Error::IndexOutOfRange {
                        what: "category",
                        index: k,
                        size: self.cardinality,
                    });
                }
                Ok(v)
            }
            _ => Err(Error::Conformance(format!(
                "{}: expected a categorical leaf",
                self.name
            ))),
        }
    }

    /// Logits `cond · Wᵀ` computed without a tape.
    pub fn logits<F: Scalar>(&self, params: &ParamStore<F>, cond: &Tensor<F>) -> Result<Tensor<F>> {
        cond.matmul_nt(params.get(self.weight))
    }

    /// Draws one index per row of `cond`.
    pub fn sample_indices<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        cond: &Tensor<F>,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<usize>> {
        let logits = self.logits(params, cond)?;
        let rows = logits.rows();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let probs = softmax(logits.row(r));
            out.push(sample_index(&probs, rng.random::<f64>()));
        }
        Ok(out)
    }
}

impl<F: Scalar> Codec<F> for CategoricalCodec {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> CodecKind {
        CodecKind::Categorical
    }

    fn describe(&self) -> String {
        "C_cat".into()
    }

    fn layout(&self) -> Layout {
        Layout::Categorical {
            cardinality: self.cardinality,
        }
    }

    fn encode(&self, g: &mut Graph<'_, F>, x: &BatchTree, _shuffle: &mut Shuffle<'_>) -> Result<Encoded> {
        let idx = self.leaf(x)?.to_vec();
        let w = g.param(self.weight);
        Ok(Encoded {
            embedding: g.gather_rows(w, idx)?,
            context: Context::Trivial,
        })
    }

    fn decode(&self, g: &mut Graph<'_, F>, cond: NodeId, _ctx: &Context) -> Result<DistRep> {
        let w = g.param(self.weight);
        Ok(DistRep::Logits(g.matmul_nt(cond, w)?))
    }

    fn loss(&self, g: &mut Graph<'_, F>, dist: &DistRep, x: &BatchTree, weights: &[F]) -> Result<NodeId> {
        let DistRep::Logits(logits) = dist else {
            return Err(Error::Conformance(format!("{}: expected logits", self.name)));
        };
        let targets = self.leaf(x)?.to_vec();
        g.cross_entropy(*logits, targets, weights.to_vec())
    }

    fn sample(&self, params: &ParamStore<F>, cond: &Tensor<F>, rng: &mut dyn RngCore) -> Result<Sampled> {
        let idx = self.sample_indices(params, cond, rng)?;
        Ok(Sampled {
            values: idx.iter().map(|&k| Value::Cat(k)).collect(),
            batch: BatchTree::Leaf(idx),
        })
    }

    fn enumerate(&self, limit: usize) -> Option<Vec<Value>> {
        (self.cardinality <= limit).then(|| (0..self.cardinality).map(Value::Cat).collect())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn codec_with(rows: &[Vec<f64>]) -> (ParamStore<f64>, CategoricalCodec) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = rows[0].len();
        let c = CategoricalCodec::new(&mut store, "x", "x", rows.len(), d, 0.02, &mut rng).unwrap();
        *store.get_mut(c.weight()) = Tensor::from_rows(rows).unwrap();
        (store, c)
    }

    #[test]
    fn encode_is_row_lookup() {
        let (store, c) = codec_with(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let mut g = Graph::inference(&store);
        let e = Codec::<f64>::encode(&c, &mut g, &BatchTree::Leaf(vec![1, 0, 0]), &mut Shuffle::Off).unwrap();
        assert_eq!(g.value(e.embedding).data(), &[3.0, 4.0, 1.0, 2.0, 1.0, 2.0]);
        let bad = Codec::<f64>::encode(&c, &mut g, &BatchTree::Leaf(vec![3]), &mut Shuffle::Off);
        assert!(bad.is_err());
    }

    #[test]
    fn decode_projects_onto_rows() {
        let (store, c) = codec_with(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut g = Graph::inference(&store);
        let cond = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let DistRep::Logits(l) = Codec::<f64>::decode(&c, &mut g, cond, &Context::Trivial).unwrap() else {
            panic!()
        };
        assert_eq!(g.value(l).data(), &[1.0, 0.0, 0.0, 0.0]);
        let wide = g.constant(Tensor::zeros(&[1, 3]));
        assert!(Codec::<f64>::decode(&c, &mut g, wide, &Context::Trivial).is_err());
    }

    #[test]
    fn decode_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let c = CategoricalCodec::new(&mut store, "x", "x", 5, 7, 1.0, &mut rng).unwrap();
        let cond: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits = c.logits(&store, &Tensor::new(vec![1, 7], cond.clone()).unwrap()).unwrap();
        let w = store.get(c.weight());
        for k in 0..5 {
            let mut dot = 0.0;
            for j in 0..7 {
                dot += cond[j] * w.data()[k * 7 + j];
            }
            assert!((logits.data()[k] - dot).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_values() {
        let (store, c) = codec_with(&[vec![1.0], vec![0.0]]);
        let mut g = Graph::inference(&store);
        let d = DistRep::Logits(g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()));
        let l = Codec::<f64>::loss(&c, &mut g, &d, &BatchTree::Leaf(vec![1]), &[1.0]).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let d = DistRep::Logits(g.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap()));
        let l = Codec::<f64>::loss(&c, &mut g, &d, &BatchTree::Leaf(vec![0]), &[1.0]).unwrap();
        let v = g.value(l).item();
        assert!(v.is_finite() && (0.0..1e-6).contains(&v));
    }

    #[test]
    fn single_category_loss_is_zero_and_sample_is_constant() {
        let (store, c) = codec_with(&[vec![0.3, -0.2]]);
        let mut g = Graph::inference(&store);
        let cond = g.constant(Tensor::from_rows(&[vec![4.0, 1.0]]).unwrap());
        let d = Codec::<f64>::decode(&c, &mut g, cond, &Context::Trivial).unwrap();
        let l = Codec::<f64>::loss(&c, &mut g, &d, &BatchTree::Leaf(vec![0]), &[1.0]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = c
            .sample_indices(&store, &Tensor::full(&[50, 2], 1.0), &mut rng)
            .unwrap();
        assert!(s.iter().all(|&k| k == 0));
    }

    #[test]
    fn sampling_frequencies_follow_softmax() {
        // logits (ln 8, 0, 0) via a one-dimensional conditioning vector
        let (store, c) = codec_with(&[vec![8f64.ln()], vec![0.0], vec![0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let s = c.sample_indices(&store, &Tensor::full(&[n, 1], 1.0), &mut rng).unwrap();
        let f0 = s.iter().filter(|&&k| k == 0).count() as f64 / n as f64;
        assert!((f0 - 0.8).abs() < 0.01, "{f0}");

        let (store, c) = codec_with(&[vec![0.0], vec![0.0]]);
        let s = c.sample_indices(&store, &Tensor::full(&[n, 1], 1.0), &mut rng).unwrap();
        let f0 = s.iter().filter(|&&k| k == 0).count() as f64 / n as f64;
        assert!((0.49..=0.51).contains(&f0), "{f0}");
    }

    #[test]
    fn sample_index_edges() {
        assert_eq!(sample_index(&[1.0_f64], 0.999), 0);
        assert_eq!(sample_index(&[0.5_f64, 0.5], 0.5), 1);
        assert_eq!(sample_index(&[0.5_f64, 0.5 - 1e-17, 0.0], 0.9999999999999999), 1);
    }
}
