use rand::RngCore;

use super::{product, sum_nodes, Codec, CodecKind, Context, DistRep, Encoded, Sampled, Shuffle, Value};
use crate::data::{BatchTree, Layout};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AttentionCache, AttentionParams, Graph, NodeId, ParamStore, Tensor, TransformerConfig};

/// Chain-rule composition of field codecs through an encoder transformer
/// `H^E` and a decoder transformer `H^D`.
///
/// Field `k` (in sequence order) is conditioned on the decoder output at
/// position `k`, whose input is `(c, h_1^E, …, h_{k}^E)`. The shuffled
/// variant feeds the fields in a fresh random order per batch.
#[derive(Debug)]
pub struct StructCodec<F: Scalar> {
    name: String,
    children: Vec<Box<dyn Codec<F>>>,
    encoder: AttentionParams,
    decoder: AttentionParams,
    shuffled: bool,
}

fn is_permutation(order: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    order.len() == n
        && order.iter().all(|&k| k < n && !std::mem::replace(&mut seen[k], true))
}

impl<F: Scalar> StructCodec<F> {
    /// Registers `{path}/@encoder/…` and `{path}/@decoder/…`.
    pub fn new(
        store: &mut ParamStore<F>,
        path: &str,
        name: &str,
        children: Vec<Box<dyn Codec<F>>>,
        cfg: &TransformerConfig,
        shuffled: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if children.is_empty() {
            return Err(Error::Schema(format!("{name}: a struct needs at least one field")));
        }
        let encoder = AttentionParams::allocate(store, &format!("{path}/@encoder"), cfg, rng)?;
        let decoder = AttentionParams::allocate(store, &format!("{path}/@decoder"), cfg, rng)?;
        Ok(Self {
            name: name.to_string(),
            children,
            encoder,
            decoder,
            shuffled,
        })
    }

    pub fn children(&self) -> &[Box<dyn Codec<F>>] {
        &self.children
    }

    fn fields<'a>(&self, x: &'a BatchTree) -> Result<&'a [BatchTree]> {
        match x {
            BatchTree::Struct(xs) if xs.len() == self.children.len() => Ok(xs),
            BatchTree::Struct(xs) => Err(Error::Conformance(format!(
                "{}: expected {} fields, got {}",
                self.name,
                self.children.len(),
                xs.len()
            ))),
            _ => Err(Error::Conformance(format!("{}: expected a struct", self.name))),
        }
    }

    /// Encodes every field independently, in declared order.
    pub fn encode_children(
        &self,
        g: &mut Graph<'_, F>,
        x: &BatchTree,
        shuffle: &mut Shuffle<'_>,
    ) -> Result<Vec<Encoded>> {
        let xs = self.fields(x)?;
        self.children
            .iter()
            .zip(xs)
            .map(|(c, xk)| c.encode(g, xk, shuffle))
            .collect()
    }

    /// Runs `H^E` over the child embeddings taken in `order`.
    pub fn combine(&self, g: &mut Graph<'_, F>, children: &[Encoded], order: &[usize]) -> Result<Encoded> {
        let n = self.children.len();
        if children.len() != n {
            return Err(Error::Conformance(format!("{}: {} child encodings", self.name, children.len())));
        }
        if !is_permutation(order, n) {
            return Err(Error::Config(format!("{}: invalid permutation {order:?}", self.name)));
        }
        let seq: Vec<NodeId> = order.iter().map(|&k| children[k].embedding).collect();
        let seq = g.stack(&seq)?;
        let he = self.encoder.forward(g, seq, None)?;
        let embedding = g.select_position(he, n - 1)?;
        let digests = if n > 1 {
            Some(g.slice_positions(he, 0, n - 1)?)
        } else {
            None
        };
        Ok(Encoded {
            embedding,
            context: Context::Struct {
                digests,
                children: children.iter().map(|c| c.context.clone()).collect(),
                order: order.to_vec(),
            },
        })
    }

    /// Decoder outputs for each field, returned in declared field order:
    /// `H^D(c, h_1^E, …, h_{n−1}^E)` with position `p` assigned to field
    /// `order[p]`.
    pub fn field_conditions(&self, g: &mut Graph<'_, F>, cond: NodeId, digests: Option<NodeId>, order: &[usize]) -> Result<Vec<NodeId>> {
        let n = self.children.len();
        let (rows, d) = match *g.value(cond).shape() {
            [rows, d] => (rows, d),
            ref s => return shape_err("struct decode", format!("conditioning shape {s:?}")),
        };
        let c = g.reshape(cond, vec![rows, 1, d])?;
        let input = match digests {
            Some(h) => g.concat(c, h)?,
            None => c,
        };
        if g.value(input).shape()[1] != n {
            return Err(Error::Conformance(format!("{}: context arity mismatch", self.name)));
        }
        let hd = self.decoder.forward(g, input, None)?;
        let mut conds = vec![None; n];
        for (p, &k) in order.iter().enumerate() {
            conds[k] = Some(g.select_position(hd, p)?);
        }
        Ok(conds.into_iter().map(|c| c.expect("order is a permutation")).collect())
    }

    fn decode_with(&self, g: &mut Graph<'_, F>, cond: NodeId, ctx: &Context) -> Result<DistRep> {
        let Context::Struct {
            digests,
            children,
            order,
        } = ctx
        else {
            return Err(Error::Conformance(format!("{}: expected a struct context", self.name)));
        };
        if children.len() != self.children.len() || !is_permutation(order, self.children.len()) {
            return Err(Error::Conformance(format!("{}: context arity mismatch", self.name)));
        }
        let conds = self.field_conditions(g, cond, *digests, order)?;
        let mut out = Vec::with_capacity(conds.len());
        for ((codec, c), h) in self.children.iter().zip(conds).zip(children) {
            out.push(codec.decode(g, c, h)?);
        }
        Ok(DistRep::Struct {
            children: out,
            order: order.clone(),
        })
    }
}

impl<F: Scalar> Codec<F> for StructCodec<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> CodecKind {
        CodecKind::Struct
    }

    fn describe(&self) -> String {
        let inner: Vec<String> = self
            .children
            .iter()
            .map(|c| format!("{}: {}", c.name(), c.describe()))
            .collect();
        let tag = if self.shuffled { "C_shuffled_struct" } else { "C_struct" };
        format!("{tag}[{}]", inner.join(", "))
    }

    fn layout(&self) -> Layout {
        Layout::Struct(self.children.iter().map(|c| c.layout()).collect())
    }

    fn is_shuffled(&self) -> bool {
        self.shuffled
    }

    fn has_shuffle(&self) -> bool {
        self.shuffled || self.children.iter().any(|c| c.has_shuffle())
    }

    fn encode(&self, g: &mut Graph<'_, F>, x: &BatchTree, shuffle: &mut Shuffle<'_>) -> Result<Encoded> {
        let children = self.encode_children(g, x, shuffle)?;
        let n = self.children.len();
        let order = if self.shuffled {
            shuffle.permutation(n)
        } else {
            (0..n).collect()
        };
        self.combine(g, &children, &order)
    }

    fn decode(&self, g: &mut Graph<'_, F>, cond: NodeId, ctx: &Context) -> Result<DistRep> {
        self.decode_with(g, cond, ctx)
    }

    fn loss(&self, g: &mut Graph<'_, F>, dist: &DistRep, x: &BatchTree, weights: &[F]) -> Result<NodeId> {
        let DistRep::Struct { children, order } = dist else {
            return Err(Error::Conformance(format!("{}: expected a struct distribution", self.name)));
        };
        let xs = self.fields(x)?;
        if children.len() != xs.len() || !is_permutation(order, xs.len()) {
            return Err(Error::Conformance(format!("{}: distribution arity mismatch", self.name)));
        }
        // summed in sequence order
        let mut terms = Vec::with_capacity(order.len());
        for &k in order {
            terms.push(self.children[k].loss(g, &children[k], &xs[k], weights)?);
        }
        Ok(sum_nodes(g, &terms)?.expect("at least one field"))
    }

    fn sample(&self, params: &ParamStore<F>, cond: &Tensor<F>, rng: &mut dyn RngCore) -> Result<Sampled> {
        let rows = cond.rows();
        let n = self.children.len();
        let mut enc = AttentionCache::new(&self.encoder, rows);
        let mut dec = AttentionCache::new(&self.decoder, rows);
        let mut field_cond = dec.push(params, &self.decoder, cond)?;
        let mut fields = Vec::with_capacity(n);
        for (k, child) in self.children.iter().enumerate() {
            let s = child.sample(params, &field_cond, rng)?;
            if k + 1 < n {
                let e = child.embed(params, &s.batch)?;
                let h = enc.push(params, &self.encoder, &e)?;
                field_cond = dec.push(params, &self.decoder, &h)?;
            }
            fields.push(s);
        }
        let mut columns: Vec<std::vec::IntoIter<Value>> = Vec::with_capacity(n);
        let mut batches = Vec::with_capacity(n);
        for s in fields {
            columns.push(s.values.into_iter());
            batches.push(s.batch);
        }
        let values = (0..rows)
            .map(|_| Value::Struct(columns.iter_mut().map(|c| c.next().expect("one value per row")).collect()))
            .collect();
        Ok(Sampled {
            values,
            batch: BatchTree::Struct(batches),
        })
    }

    fn shuffled_loss(
        &self,
        g: &mut Graph<'_, F>,
        cond: NodeId,
        x: &BatchTree,
        weights: &[F],
        passes: usize,
        rng: &mut dyn RngCore,
    ) -> Result<NodeId> {
        if !self.shuffled {
            return Err(Error::Config(format!("{} is not a shuffled struct", self.name)));
        }
        if passes == 0 {
            return Err(Error::Config("shuffle passes must be at least 1".into()));
        }
        let children = self.encode_children(g, x, &mut Shuffle::Random(&mut *rng))?;
        let mut terms = Vec::with_capacity(passes);
        for _ in 0..passes {
            let order = Shuffle::Random(&mut *rng).permutation(self.children.len());
            let enc = self.combine(g, &children, &order)?;
            let dist = self.decode_with(g, cond, &enc.context)?;
            terms.push(self.loss(g, &dist, x, weights)?);
        }
        let total = sum_nodes(g, &terms)?.expect("passes ≥ 1");
        Ok(g.scale(total, F::one() / F::from_usize_lossy(passes)))
    }

    fn enumerate(&self, limit: usize) -> Option<Vec<Value>> {
        let slots = self
            .children
            .iter()
            .map(|c| c.enumerate(limit))
            .collect::<Option<Vec<_>>>()?;
        Some(product(&slots, limit)?.into_iter().map(Value::Struct).collect())
    }
}
