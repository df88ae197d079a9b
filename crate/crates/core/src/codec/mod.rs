//! Codecs: (encoder, decoder, sampler, loss) quadruplets that compose like
//! the types they model.
//!
//! Every codec works on whole batches. Encoders and decoders record onto a
//! [`Graph`] so the loss can be differentiated; samplers run tape-free on
//! plain tensors.

pub mod checks;
mod categorical;
mod list;
mod numerical;
mod record;
mod tree;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::data::{expand_rows, BatchTree, Layout};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};

pub use categorical::{sample_index, CategoricalCodec};
pub use list::ListCodec;
pub use numerical::{NumericalCodec, QuantileTable};
pub use record::StructCodec;
pub use tree::CodecTree;

/// One observation, shaped like its schema.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    /// Category index (vocabulary position).
    Cat(usize),
    Num(f64),
    /// Fields in declared order.
    Struct(Vec<Value>),
    List(Vec<Value>),
}

/// Intermediate data an encoder hands to the matching decoder.
#[derive(Clone, Debug)]
pub enum Context {
    Trivial,
    Struct {
        /// Encoder digests at sequence positions `0..n-1`, `[N, n-1, d]`;
        /// absent for a single field.
        digests: Option<NodeId>,
        /// Child contexts in declared field order.
        children: Vec<Context>,
        /// `order[p]` is the field encoded at sequence position `p`.
        order: Vec<usize>,
    },
    List {
        /// Length digest followed by item digests `1..max_len-1`,
        /// `[N, max_len, d]`.
        digests: NodeId,
        /// Context of the (possibly permuted) item rows, `N × max_len`.
        items: Box<Context>,
        lengths: Vec<usize>,
        max_len: usize,
        /// Per-observation item permutation (set codecs).
        perms: Option<Vec<Vec<usize>>>,
    },
}

impl Context {
    /// The context of a row selection, mirroring [`BatchTree::select_rows`].
    pub fn gather_rows<F: Scalar>(&self, g: &mut Graph<'_, F>, rows: &[usize]) -> Result<Context> {
        Ok(match self {
            Context::Trivial => Context::Trivial,
            Context::Struct {
                digests,
                children,
                order,
            } => Context::Struct {
                digests: digests.map(|d| g.gather_rows(d, rows.to_vec())).transpose()?,
                children: children
                    .iter()
                    .map(|c| c.gather_rows(g, rows))
                    .collect::<Result<_>>()?,
                order: order.clone(),
            },
            Context::List {
                digests,
                items,
                lengths,
                max_len,
                perms,
            } => Context::List {
                digests: g.gather_rows(*digests, rows.to_vec())?,
                items: Box::new(items.gather_rows(g, &expand_rows(rows, *max_len))?),
                lengths: rows.iter().map(|&r| lengths[r]).collect(),
                max_len: *max_len,
                perms: perms
                    .as_ref()
                    .map(|p| rows.iter().map(|&r| p[r].clone()).collect()),
            },
        })
    }
}

/// Output of an encoder: embeddings `[N, d]` plus the decoder's context.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub embedding: NodeId,
    pub context: Context,
}

/// Distribution representation produced by a decoder.
#[derive(Clone, Debug)]
pub enum DistRep {
    /// Unnormalized log-probabilities `[N, n]`.
    Logits(NodeId),
    Struct {
        /// In declared field order.
        children: Vec<DistRep>,
        order: Vec<usize>,
    },
    List {
        length: Box<DistRep>,
        /// Over `N × max_len` item rows.
        items: Box<DistRep>,
        perms: Option<Vec<Vec<usize>>>,
    },
}

/// Samples together with their batch encoding.
///
/// `batch` holds the indices the sampler actually drew (for numbers, the
/// bin), which is what later autoregressive steps are conditioned on.
#[derive(Clone, Debug)]
pub struct Sampled {
    pub values: Vec<Value>,
    pub batch: BatchTree,
}

/// Source of permutations for shuffled codecs during encoding.
pub enum Shuffle<'a> {
    /// Declared order everywhere.
    Off,
    Random(&'a mut dyn RngCore),
}

impl Shuffle<'_> {
    /// A uniformly random permutation of `0..n`, or identity when off.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        if let Shuffle::Random(rng) = self {
            p.shuffle(*rng);
        }
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecKind {
    Categorical,
    Numerical,
    Struct,
    List,
}

pub trait Codec<F: Scalar>: std::fmt::Debug + Send + Sync {
    /// Field name of the node this codec models.
    fn name(&self) -> &str;

    fn kind(&self) -> CodecKind;

    /// Codec expression such as `C_struct[a: C_cat, b: C_num]`.
    fn describe(&self) -> String;

    fn layout(&self) -> Layout;

    /// Whether this node itself is a shuffled struct or a set.
    fn is_shuffled(&self) -> bool {
        false
    }

    /// Whether any node in this subtree is shuffled.
    fn has_shuffle(&self) -> bool {
        self.is_shuffled()
    }

    fn encode(&self, g: &mut Graph<'_, F>, x: &BatchTree, shuffle: &mut Shuffle<'_>) -> Result<Encoded>;

    fn decode(&self, g: &mut Graph<'_, F>, cond: NodeId, ctx: &Context) -> Result<DistRep>;

    /// Weighted negative log-likelihood summed over rows; rows with weight
    /// zero contribute nothing.
    fn loss(&self, g: &mut Graph<'_, F>, dist: &DistRep, x: &BatchTree, weights: &[F]) -> Result<NodeId>;

    /// Draws one value per row of `cond[N, d]`.
    fn sample(&self, params: &ParamStore<F>, cond: &Tensor<F>, rng: &mut dyn RngCore) -> Result<Sampled>;

    /// Loss averaged over `passes` fresh permutations of this node's
    /// positions, encoding the children only once. Only shuffled nodes
    /// support this.
    fn shuffled_loss(
        &self,
        _g: &mut Graph<'_, F>,
        _cond: NodeId,
        _x: &BatchTree,
        _weights: &[F],
        _passes: usize,
        _rng: &mut dyn RngCore,
    ) -> Result<NodeId> {
        Err(crate::Error::Config(format!(
            "{} is not a shuffled codec",
            self.name()
        )))
    }

    /// Every possible value, when the domain is finite and small.
    fn enumerate(&self, limit: usize) -> Option<Vec<Value>>;

    /// Embeddings of `x` without recording gradients.
    fn embed(&self, params: &ParamStore<F>, x: &BatchTree) -> Result<Tensor<F>> {
        let mut g = Graph::inference(params);
        let e = self.encode(&mut g, x, &mut Shuffle::Off)?;
        Ok(g.value(e.embedding).clone())
    }
}

/// Sum of scalar nodes; `None` for an empty list.
pub(crate) fn sum_nodes<F: Scalar>(g: &mut Graph<'_, F>, nodes: &[NodeId]) -> Result<Option<NodeId>> {
    let mut total: Option<NodeId> = None;
    for &n in nodes {
        total = Some(match total {
            None => n,
            Some(t) => g.add(t, n)?,
        });
    }
    Ok(total)
}

/// Cartesian product of per-slot alternatives, or `None` past `limit`.
pub(crate) fn product(slots: &[Vec<Value>], limit: usize) -> Option<Vec<Vec<Value>>> {
    let mut out: Vec<Vec<Value>> = vec![vec![]];
    for alts in slots {
        if out.len().saturating_mul(alts.len()) > limit {
            return None;
        }
        out = out
            .iter()
            .flat_map(|prefix| {
                alts.iter().map(move |a| {
                    let mut v = prefix.clone();
                    v.push(a.clone());
                    v
                })
            })
            .collect();
    }
    Some(out)
}

#[cfg(test)]
mod tests;
