//! The reduced causal transformer: `y = CausalSelfAttention(x) + x` per
//! block, with no layer norm and no feed-forward layer.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::dense::softmax_row;
use super::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Architecture of every causal transformer in a codec tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Model width `d`, shared by all embeddings in the tree.
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Standard deviation of the normal initializer.
    pub init_std: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 2,
            heads: 8,
            init_std: 0.02,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.blocks == 0 || self.heads == 0 {
            return Err(Error::Config("width, blocks and heads must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

/// Projections of one attention block. Each `d × d` matrix holds the
/// per-head `d × d/heads` projections side by side.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub blocks: Vec<BlockParams>,
    pub heads: usize,
    pub width: usize,
}

impl AttentionParams {
    /// Registers `blocks × 4` projection matrices under `prefix`.
    pub fn allocate<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &TransformerConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let mut mk = |name: &str| {
                store.insert_normal(format!("{prefix}/block{b}/{name}"), &[d, d], cfg.init_std, rng)
            };
            blocks.push(BlockParams {
                query: mk("query")?,
                key: mk("key")?,
                value: mk("value")?,
                output: mk("output")?,
            });
        }
        Ok(Self {
            blocks,
            heads: cfg.heads,
            width: d,
        })
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.blocks
            .iter()
            .flat_map(|b| [b.query, b.key, b.value, b.output])
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        x: NodeId,
        key_valid: Option<&[bool]>,
    ) -> Result<NodeId> {
        causal_attention(g, x, self, key_valid)
    }
}

/// Runs the reduced causal transformer over `x[n, L, d]`.
pub fn causal_attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: NodeId,
    params: &AttentionParams,
    key_valid: Option<&[bool]>,
) -> Result<NodeId> {
    let (n, l, d) = match *g.value(x).shape() {
        [n, l, d] => (n, l, d),
        ref s => return shape_err("causal_attention", format!("expected [n, L, d], got {s:?}")),
    };
    if l == 0 {
        return shape_err("causal_attention", "empty sequence");
    }
    if d != params.width {
        return shape_err(
            "causal_attention",
            format!("input width {d}, transformer width {}", params.width),
        );
    }
    let mut h = x;
    for block in &params.blocks {
        let flat = g.reshape(h, vec![n * l, d])?;
        let project = |g: &mut Graph<'_, F>, w: ParamId| -> Result<NodeId> {
            let w = g.param(w);
            let y = g.matmul(flat, w)?;
            g.reshape(y, vec![n, l, d])
        };
        let q = project(g, block.query)?;
        let k = project(g, block.key)?;
        let v = project(g, block.value)?;
        let att = g.attention(q, k, v, params.heads, key_valid)?;
        let att = g.reshape(att, vec![n * l, d])?;
        let wo = g.param(block.output);
        let out = g.matmul(att, wo)?;
        let out = g.reshape(out, vec![n, l, d])?;
        h = g.add(h, out)?;
    }
    Ok(h)
}

/// Position-at-a-time evaluation of the causal transformer for sampling.
///
/// Causality means earlier outputs never change when a position is
/// appended, so keeping each block's keys and values is enough to produce
/// the new output in `O(L)`. Results match [`causal_attention`] bit for bit.
#[derive(Clone, Debug)]
pub struct AttentionCache<F> {
    /// `[block][row]`, each `len × d`.
    keys: Vec<Vec<Vec<F>>>,
    values: Vec<Vec<Vec<F>>>,
    len: usize,
}

impl<F: Scalar> AttentionCache<F> {
    pub fn new(params: &AttentionParams, rows: usize) -> Self {
        let empty = vec![vec![Vec::new(); rows]; params.blocks.len()];
        Self {
            keys: empty.clone(),
            values: empty,
            len: 0,
        }
    }

    /// Positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rows(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    /// Keeps only the listed rows, in the given order.
    pub fn retain_rows(&mut self, rows: &[usize]) {
        for per_block in self.keys.iter_mut().chain(self.values.iter_mut()) {
            *per_block = rows.iter().map(|&r| std::mem::take(&mut per_block[r])).collect();
        }
    }

    /// Appends `x[rows, d]` as the next position and returns the
    /// transformer output there.
    pub fn push(
        &mut self,
        store: &ParamStore<F>,
        params: &AttentionParams,
        x: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let rows = self.rows();
        let d = params.width;
        if x.shape() != [rows, d] {
            return shape_err(
                "AttentionCache::push",
                format!("expected [{rows}, {d}], got {:?}", x.shape()),
            );
        }
        let heads = params.heads;
        let dh = d / heads;
        let scale = F::one() / F::from_usize_lossy(dh).sqrt();
        let l = self.len + 1;
        let mut h = x.clone();
        let mut scores = vec![F::zero(); l];
        let mut p = vec![F::zero(); l];
        for (bi, block) in params.blocks.iter().enumerate() {
            let q = h.matmul(store.get(block.query))?;
            let k = h.matmul(store.get(block.key))?;
            let v = h.matmul(store.get(block.value))?;
            let mut att = vec![F::zero(); rows * d];
            for r in 0..rows {
                let keys = &mut self.keys[bi][r];
                keys.extend_from_slice(k.row(r));
                let values = &mut self.values[bi][r];
                values.extend_from_slice(v.row(r));
                let qr = q.row(r);
                for hd in 0..heads {
                    let off = hd * dh;
                    let qi = &qr[off..off + dh];
                    for (j, s_out) in scores.iter_mut().enumerate() {
                        let kj = &keys[j * d + off..j * d + off + dh];
                        let mut s = F::zero();
                        for (&a, &b) in qi.iter().zip(kj) {
                            s += a * b;
                        }
                        *s_out = s * scale;
                    }
                    softmax_row(&scores, &mut p);
                    let o = &mut att[r * d + off..r * d + off + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == F::zero() {
                            continue;
                        }
                        let vj = &values[j * d + off..j * d + off + dh];
                        for (oo, &a) in o.iter_mut().zip(vj) {
                            *oo += pj * a;
                        }
                    }
                }
            }
            let out = Tensor::new(vec![rows, d], att)?.matmul(store.get(block.output))?;
            let next: Vec<F> = h.data().iter().zip(out.data()).map(|(&a, &b)| a + b).collect();
            h = Tensor::new(vec![rows, d], next)?;
        }
        self.len = l;
        Ok(h)
    }
}
