use rand::RngCore;

use super::{Codec, Shuffle, Value};
use crate::data::{BatchTree, Layout};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Graph, NodeId, ParamId, ParamStore, Tensor};

/// Rows per sampling chunk, bounding peak memory.
const SAMPLE_CHUNK: usize = 1024;

/// A root codec together with its initial conditioning vector `c0`.
#[derive(Debug)]
pub struct CodecTree<F: Scalar> {
    root: Box<dyn Codec<F>>,
    c0: ParamId,
    width: usize,
}

impl<F: Scalar> CodecTree<F> {
    /// Registers `@c0` as a zero `[1, width]` tensor.
    pub fn new(store: &mut ParamStore<F>, root: Box<dyn Codec<F>>, width: usize, trainable_c0: bool) -> Result<Self> {
        let c0 = store.insert_with("@c0", Tensor::zeros(&[1, width]), trainable_c0)?;
        Ok(Self { root, c0, width })
    }

    pub fn root(&self) -> &dyn Codec<F> {
        self.root.as_ref()
    }

    pub fn c0(&self) -> ParamId {
        self.c0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layout(&self) -> Layout {
        self.root.layout()
    }

    /// `User: C_struct[…]`.
    pub fn describe(&self) -> String {
        format!("{}: {}", self.root.name(), self.root.describe())
    }

    /// `c0` repeated for `rows` observations.
    pub fn conditioning(&self, g: &mut Graph<'_, F>, rows: usize) -> Result<NodeId> {
        let c0 = g.param(self.c0);
        g.gather_rows(c0, vec![0; rows])
    }

    /// Mean negative log-likelihood of the batch, one encoding pass.
    pub fn loss(&self, g: &mut Graph<'_, F>, x: &BatchTree, shuffle: &mut Shuffle<'_>) -> Result<NodeId> {
        let rows = x.rows();
        if rows == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let enc = self.root.encode(g, x, shuffle)?;
        let c = self.conditioning(g, rows)?;
        let dist = self.root.decode(g, c, &enc.context)?;
        let total = self.root.loss(g, &dist, x, &vec![F::one(); rows])?;
        Ok(g.scale(total, F::one() / F::from_usize_lossy(rows)))
    }

    /// Mean loss averaged over `passes` shuffle passes.
    ///
    /// When the root itself is shuffled its children are encoded once and
    /// only the transformer passes repeat; otherwise each pass re-encodes.
    pub fn loss_passes(
        &self,
        g: &mut Graph<'_, F>,
        x: &BatchTree,
        passes: usize,
        rng: &mut dyn RngCore,
    ) -> Result<NodeId> {
        if passes == 0 {
            return Err(Error::Config("shuffle passes must be at least 1".into()));
        }
        if passes == 1 {
            return self.loss(g, x, &mut Shuffle::Random(rng));
        }
        if !self.root.has_shuffle() {
            return Err(Error::Config(format!(
                "{passes} shuffle passes requested but the schema has no shuffled node"
            )));
        }
        let rows = x.rows();
        if rows == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if self.root.is_shuffled() {
            let c = self.conditioning(g, rows)?;
            let total = self
                .root
                .shuffled_loss(g, c, x, &vec![F::one(); rows], passes, rng)?;
            return Ok(g.scale(total, F::one() / F::from_usize_lossy(rows)));
        }
        let mut total: Option<NodeId> = None;
        for _ in 0..passes {
            let l = self.loss(g, x, &mut Shuffle::Random(&mut *rng))?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        Ok(g.scale(total.expect("passes ≥ 2"), F::one() / F::from_usize_lossy(passes)))
    }

    /// Loss value and parameter gradients for one batch.
    pub fn train_step(
        &self,
        params: &ParamStore<F>,
        x: &BatchTree,
        passes: usize,
        rng: &mut dyn RngCore,
    ) -> Result<(F, Gradients<F>)> {
        let mut g = Graph::new(params);
        let loss = self.loss_passes(&mut g, x, passes, rng)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value}")));
        }
        Ok((value, g.backward(loss)?))
    }

    /// Draws `count` observations starting from `c0`.
    pub fn sample(&self, params: &ParamStore<F>, count: usize, rng: &mut dyn RngCore) -> Result<Vec<Value>> {
        let c0 = params.get(self.c0);
        let mut out = Vec::with_capacity(count);
        let mut left = count;
        while left > 0 {
            let rows = left.min(SAMPLE_CHUNK);
            let cond = Tensor::new(vec![rows, self.width], c0.data().repeat(rows))?;
            out.extend(self.root.sample(params, &cond, rng)?.values);
            left -= rows;
        }
        Ok(out)
    }

    /// Log-likelihood of each value under the declared field order.
    pub fn log_likelihood(&self, params: &ParamStore<F>, values: &[Value]) -> Result<Vec<f64>> {
        let layout = self.layout();
        values
            .iter()
            .map(|v| {
                let x = layout.batch_values(std::slice::from_ref(v))?;
                let mut g = Graph::inference(params);
                let l = self.loss(&mut g, &x, &mut Shuffle::Off)?;
                Ok(-g.value(l).item().as_f64())
            })
            .collect()
    }

    /// Every outcome with its model probability, for finite domains of at
    /// most `limit` outcomes.
    pub fn enumerate_joint(&self, params: &ParamStore<F>, limit: usize) -> Result<Option<Vec<(Value, f64)>>> {
        let Some(values) = self.root.enumerate(limit) else {
            return Ok(None);
        };
        let ll = self.log_likelihood(params, &values)?;
        Ok(Some(values.into_iter().zip(ll.into_iter().map(f64::exp)).collect()))
    }
}
