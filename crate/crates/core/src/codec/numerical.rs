use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{CategoricalCodec, Codec, CodecKind, Context, DistRep, Encoded, Sampled, Shuffle, Value};
use crate::data::{BatchTree, Layout};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};

/// Empirical quantiles of a numeric column; bin `i` is represented by `q[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    q: Vec<f64>,
    #[serde(default)]
    integer: bool,
}

impl QuantileTable {
    pub fn new(q: Vec<f64>, integer: bool) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::Data("quantile table needs at least one value".into()));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("quantile table".into()));
        }
        if q.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Data("quantiles must be non-decreasing".into()));
        }
        Ok(Self { q, integer })
    }

    /// Quantiles at levels `i / (n − 1)`, linearly interpolated between
    /// order statistics.
    pub fn fit(values: &[f64], n: usize, integer: bool) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("cannot fit quantiles of an empty column".into()));
        }
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 quantile bins, got {n}")));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN in numeric column".into()));
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::NonFinite("infinite value in numeric column".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let last = (sorted.len() - 1) as f64;
        let q = (0..n)
            .map(|i| {
                let pos = last * i as f64 / (n - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                let frac = pos - lo as f64;
                if frac == 0.0 {
                    sorted[lo]
                } else {
                    sorted[lo] + frac * (sorted[hi] - sorted[lo])
                }
            })
            .collect();
        Self::new(q, integer)
    }

    pub fn quantiles(&self) -> &[f64] {
        &self.q
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn integer(&self) -> bool {
        self.integer
    }

    /// Index of the nearest quantile, ties toward the lower index; values
    /// outside the range land in the end bins.
    pub fn bin(&self, x: f64) -> Result<usize> {
        if x.is_nan() {
            return Err(Error::NonFinite("NaN cannot be binned".into()));
        }
        let q = &self.q;
        let above = q.partition_point(|&v| v < x);
        if above == 0 {
            return Ok(0);
        }
        if above == q.len() {
            return Ok(q.partition_point(|&v| v < q[q.len() - 1]));
        }
        let below = above - 1;
        let pick = if x - q[below] <= q[above] - x {
            below
        } else {
            above
        };
        // lowest index holding the chosen value
        Ok(q.partition_point(|&v| v < q[pick]))
    }

    /// The number for bin `i` at relative position `u ∈ [0, 1)` inside its
    /// interval `[q_i, q_{i+1}]`; the last bin reuses the last interval.
    pub fn value_in_bin(&self, i: usize, u: f64) -> f64 {
        let n = self.q.len();
        let (lo, hi) = if n == 1 {
            (self.q[0], self.q[0])
        } else if i + 1 < n {
            (self.q[i], self.q[i + 1])
        } else {
            (self.q[n - 2], self.q[n - 1])
        };
        let x = lo + u * (hi - lo);
        if self.integer {
            x.round()
        } else {
            x
        }
    }
}

/// Quantile binning in front of a categorical codec over the bins.
#[derive(Clone, Debug)]
pub struct NumericalCodec {
    bins: CategoricalCodec,
    table: QuantileTable,
}

impl NumericalCodec {
    /// Registers `{path}/W` with one row per quantile.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        path: &str,
        name: &str,
        table: QuantileTable,
        width: usize,
        init_std: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let bins = CategoricalCodec::new(store, path, name, table.len(), width, init_std, rng)?;
        Ok(Self { bins, table })
    }

    pub fn table(&self) -> &QuantileTable {
        &self.table
    }

    pub fn bins(&self) -> &CategoricalCodec {
        &self.bins
    }
}

impl<F: Scalar> Codec<F> for NumericalCodec {
    fn name(&self) -> &str {
        Codec::<F>::name(&self.bins)
    }

    fn kind(&self) -> CodecKind {
        CodecKind::Numerical
    }

    fn describe(&self) -> String {
        "C_num".into()
    }

    fn layout(&self) -> Layout {
        Layout::Numerical(self.table.clone())
    }

    fn encode(&self, g: &mut Graph<'_, F>, x: &BatchTree, shuffle: &mut Shuffle<'_>) -> Result<Encoded> {
        self.bins.encode(g, x, shuffle)
    }

    fn decode(&self, g: &mut Graph<'_, F>, cond: NodeId, ctx: &Context) -> Result<DistRep> {
        self.bins.decode(g, cond, ctx)
    }

    fn loss(&self, g: &mut Graph<'_, F>, dist: &DistRep, x: &BatchTree, weights: &[F]) -> Result<NodeId> {
        self.bins.loss(g, dist, x, weights)
    }

    fn sample(&self, params: &ParamStore<F>, cond: &Tensor<F>, rng: &mut dyn RngCore) -> Result<Sampled> {
        let idx = self.bins.sample_indices(params, cond, rng)?;
        let values = idx
            .iter()
            .map(|&i| Value::Num(self.table.value_in_bin(i, rng.random::<f64>())))
            .collect();
        Ok(Sampled {
            values,
            batch: BatchTree::Leaf(idx),
        })
    }

    fn enumerate(&self, _limit: usize) -> Option<Vec<Value>> {
        None
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn fit_examples() {
        let t = QuantileTable::fit(&[5.0, 5.0, 5.0], 2, false).unwrap();
        assert_eq!(t.quantiles(), &[5.0, 5.0]);
        let t = QuantileTable::fit(&[4.0, 2.0, 1.0, 3.0], 2, false).unwrap();
        assert_eq!(t.quantiles(), &[1.0, 4.0]);
        assert!(QuantileTable::fit(&[], 2, false).is_err());
        assert!(QuantileTable::fit(&[1.0, f64::NAN], 2, false).is_err());
        assert!(QuantileTable::fit(&[1.0], 1, false).is_err());
    }

    #[test]
    fn fit_interpolates_between_order_statistics() {
        // levels 0, 1/3, 2/3, 1 over [0, 10, 20]: positions 0, 2/3, 4/3, 2
        let t = QuantileTable::fit(&[20.0, 0.0, 10.0], 4, false).unwrap();
        let expect = [0.0, 20.0 / 3.0, 40.0 / 3.0, 20.0];
        for (a, b) in t.quantiles().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_uniform_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let t = QuantileTable::fit(&xs, 11, false).unwrap();
        for (i, q) in t.quantiles().iter().enumerate() {
            assert!((q - i as f64 / 10.0).abs() < 0.02);
        }
    }

    #[test]
    fn bin_examples() {
        let t = QuantileTable::new(vec![1.0, 4.0], false).unwrap();
        assert_eq!(t.bin(1.4).unwrap(), 0);
        assert_eq!(t.bin(2.5).unwrap(), 0);
        assert_eq!(t.bin(100.0).unwrap(), 1);
        assert_eq!(t.bin(-100.0).unwrap(), 0);
        assert!(t.bin(f64::NAN).is_err());
        let dup = QuantileTable::new(vec![0.0, 2.0, 2.0, 5.0], false).unwrap();
        assert_eq!(dup.bin(2.1).unwrap(), 1);
        assert_eq!(dup.bin(9.0).unwrap(), 3);
    }

    #[test]
    fn value_in_bin_examples() {
        let t = QuantileTable::new(vec![5.0, 5.0], false).unwrap();
        assert_eq!(t.value_in_bin(0, 0.7), 5.0);
        assert_eq!(t.value_in_bin(1, 0.7), 5.0);
        let t = QuantileTable::new(vec![0.0, 1.0, 2.0], false).unwrap();
        assert_eq!(t.value_in_bin(2, 0.25), 1.25);
        let t = QuantileTable::new(vec![0.0, 10.0], true).unwrap();
        assert_eq!(t.value_in_bin(0, 0.26), 3.0);
    }

    #[test]
    fn uniform_bins_give_mixture_mean() {
        // uniform over bins of q=(0,1,2): intervals [0,1],[1,2],[1,2]
        let t = QuantileTable::new(vec![0.0, 1.0, 2.0], false).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = NumericalCodec::new(&mut store, "v", "v", t, 4, 0.02, &mut rng).unwrap();
        let n = 100_000;
        let s = Codec::<f64>::sample(&c, &store, &Tensor::zeros(&[n, 4]), &mut rng).unwrap();
        let mean: f64 = s
            .values
            .iter()
            .map(|v| match v {
                Value::Num(x) => *x,
                _ => unreachable!(),
            })
            .sum::<f64>()
            / n as f64;
        // (0.5 + 1.5 + 1.5) / 3
        let expect = 3.5 / 3.0;
        assert!((mean - expect).abs() < 0.02, "{mean}");
        if let BatchTree::Leaf(bins) = &s.batch {
            assert!(bins.iter().all(|&b| b < 3));
        }
    }

    proptest! {
        #[test]
        fn bin_is_nearest_quantile(
            mut q in prop::collection::vec(-100.0f64..100.0, 2..20),
            u in 0.0f64..1.0,
        ) {
            q.sort_by(f64::total_cmp);
            let t = QuantileTable::new(q.clone(), false).unwrap();
            let x = q[0] + u * (q[q.len() - 1] - q[0]);
            let i = t.bin(x).unwrap();
            let best = q.iter().map(|v| (v - x).abs()).fold(f64::INFINITY, f64::min);
            prop_assert_eq!((q[i] - x).abs(), best);
            let brute = q.iter().position(|v| (v - x).abs() == best).unwrap();
            prop_assert_eq!(i, brute);
            let lo = q[i.saturating_sub(1)];
            let hi = q[(i + 1).min(q.len() - 1)];
            prop_assert!((x - q[i]).abs() <= hi - lo);
        }
    }
}
