use rand::RngCore;

use super::{
    product, sum_nodes, CategoricalCodec, Codec, CodecKind, Context, DistRep, Encoded, Sampled, Shuffle, Value,
};
use crate::data::{BatchTree, Layout};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AttentionCache, AttentionParams, Graph, NodeId, ParamId, ParamStore, Tensor, TransformerConfig};

/// Variable-length list: a categorical length codec over `0..=max_len`
/// followed by the items, chained through `H^E` / `H^D`.
///
/// The set variant permutes each observation's items before every pass.
#[derive(Debug)]
pub struct ListCodec<F: Scalar> {
    name: String,
    max_len: usize,
    length: CategoricalCodec,
    item: Box<dyn Codec<F>>,
    encoder: AttentionParams,
    decoder: AttentionParams,
    /// Learned `[max_len + 1, d]` table added to encoder inputs.
    positional: Option<ParamId>,
    shuffled: bool,
}

/// Item-row gather index applying `perms` inside each observation.
fn perm_index(perms: &[Vec<usize>], max_len: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(perms.len() * max_len);
    for (b, p) in perms.iter().enumerate() {
        idx.extend(p.iter().map(|&j| b * max_len + j));
        idx.extend((p.len()..max_len).map(|j| b * max_len + j));
    }
    idx
}

/// `mask[b * (max_len + 1) + p]` is true for `p ≤ lengths[b]`.
fn sequence_mask(lengths: &[usize], max_len: usize) -> Vec<bool> {
    lengths
        .iter()
        .flat_map(|&m| (0..=max_len).map(move |p| p <= m))
        .collect()
}

#[allow(clippy::too_many_arguments)]
impl<F: Scalar> ListCodec<F> {
    /// Registers `{path}/@length/W`, the two transformers and, if asked,
    /// `{path}/@position`.
    pub fn new(
        store: &mut ParamStore<F>,
        path: &str,
        name: &str,
        max_len: usize,
        item: Box<dyn Codec<F>>,
        cfg: &TransformerConfig,
        shuffled: bool,
        positional: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::Schema(format!("{name}: max_len must be at least 1")));
        }
        let length = CategoricalCodec::new(
            store,
            &format!("{path}/@length"),
            "@length",
            max_len + 1,
            cfg.width,
            cfg.init_std,
            rng,
        )?;
        let encoder = AttentionParams::allocate(store, &format!("{path}/@encoder"), cfg, rng)?;
        let decoder = AttentionParams::allocate(store, &format!("{path}/@decoder"), cfg, rng)?;
        let positional = if positional {
            Some(store.insert_normal(format!("{path}/@position"), &[max_len + 1, cfg.width], cfg.init_std, rng)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            max_len,
            length,
            item,
            encoder,
            decoder,
            positional,
            shuffled,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn item(&self) -> &dyn Codec<F> {
        self.item.as_ref()
    }

    pub fn length_codec(&self) -> &CategoricalCodec {
        &self.length
    }

    fn parts<'a>(&self, x: &'a BatchTree) -> Result<(&'a [usize], &'a BatchTree)> {
        match x {
            BatchTree::List {
                lengths,
                max_len,
                items,
            } if *max_len == self.max_len => {
                if let Some(&m) = lengths.iter().find(|&&m| m > self.max_len) {
                    return Err(Error::Conformance(format!(
                        "{}: length {m} exceeds max_len {}",
                        self.name, self.max_len
                    )));
                }
                Ok((lengths, items))
            }
            BatchTree::List { max_len, .. } => Err(Error::Conformance(format!(
                "{}: batch max_len {max_len}, codec max_len {}",
                self.name, self.max_len
            ))),
            _ => Err(Error::Conformance(format!("{}: expected a list", self.name))),
        }
    }

    /// Encodes the length and every item row, without the transformer.
    pub fn encode_parts(
        &self,
        g: &mut Graph<'_, F>,
        x: &BatchTree,
        shuffle: &mut Shuffle<'_>,
    ) -> Result<(Encoded, Encoded)> {
        let (lengths, items) = self.parts(x)?;
        let len_enc = self.length.encode(g, &BatchTree::Leaf(lengths.to_vec()), shuffle)?;
        let item_enc = self.item.encode(g, items, shuffle)?;
        Ok((len_enc, item_enc))
    }

    /// Random per-observation permutations of the valid items.
    pub fn draw_perms(&self, lengths: &[usize], shuffle: &mut Shuffle<'_>) -> Vec<Vec<usize>> {
        lengths.iter().map(|&m| shuffle.permutation(m)).collect()
    }

    /// Runs `H^E` over `(e_len, e_1, …, e_max_len)` with items permuted by
    /// `perms` when given.
    pub fn combine(
        &self,
        g: &mut Graph<'_, F>,
        len_enc: &Encoded,
        item_enc: &Encoded,
        lengths: &[usize],
        perms: Option<Vec<Vec<usize>>>,
    ) -> Result<Encoded> {
        let rows = lengths.len();
        let l = self.max_len;
        let d = self.encoder.width;
        let (items, item_ctx) = match &perms {
            Some(p) => {
                if p.len() != rows || p.iter().zip(lengths).any(|(p, &m)| p.len() != m) {
                    return Err(Error::Config(format!("{}: permutations do not match lengths", self.name)));
                }
                let idx = perm_index(p, l);
                (
                    g.gather_rows(item_enc.embedding, idx.clone())?,
                    item_enc.context.gather_rows(g, &idx)?,
                )
            }
            None => (item_enc.embedding, item_enc.context.clone()),
        };
        let items = g.reshape(items, vec![rows, l, d])?;
        let head = g.reshape(len_enc.embedding, vec![rows, 1, d])?;
        let mut seq = g.concat(head, items)?;
        if let Some(pos) = self.positional {
            let table = g.param(pos);
            seq = g.add_positional(seq, table)?;
        }
        let mask = sequence_mask(lengths, l);
        let he = self.encoder.forward(g, seq, Some(&mask))?;
        let embedding = g.gather_positions(he, lengths.to_vec())?;
        let digests = g.slice_positions(he, 0, l)?;
        Ok(Encoded {
            embedding,
            context: Context::List {
                digests,
                items: Box::new(item_ctx),
                lengths: lengths.to_vec(),
                max_len: l,
                perms,
            },
        })
    }

    fn decode_with(&self, g: &mut Graph<'_, F>, cond: NodeId, ctx: &Context) -> Result<DistRep> {
        let Context::List {
            digests,
            items,
            lengths,
            max_len,
            perms,
        } = ctx
        else {
            return Err(Error::Conformance(format!("{}: expected a list context", self.name)));
        };
        if *max_len != self.max_len {
            return Err(Error::Conformance(format!("{}: context max_len mismatch", self.name)));
        }
        let (rows, d) = match *g.value(cond).shape() {
            [rows, d] => (rows, d),
            ref s => return shape_err("list decode", format!("conditioning shape {s:?}")),
        };
        let l = self.max_len;
        let c = g.reshape(cond, vec![rows, 1, d])?;
        let input = g.concat(c, *digests)?;
        let mask = sequence_mask(lengths, l);
        let hd = self.decoder.forward(g, input, Some(&mask))?;
        let len_cond = g.select_position(hd, 0)?;
        let length = self.length.decode(g, len_cond, &Context::Trivial)?;
        let item_cond = g.slice_positions(hd, 1, l + 1)?;
        let item_cond = g.reshape(item_cond, vec![rows * l, d])?;
        let items = self.item.decode(g, item_cond, items)?;
        Ok(DistRep::List {
            length: Box::new(length),
            items: Box::new(items),
            perms: perms.clone(),
        })
    }
}

impl<F: Scalar> Codec<F> for ListCodec<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> CodecKind {
        CodecKind::List
    }

    fn describe(&self) -> String {
        let tag = if self.shuffled { "C_set" } else { "C_list" };
        format!("{tag}[{}: {}]", self.item.name(), self.item.describe())
    }

    fn layout(&self) -> Layout {
        Layout::List {
            max_len: self.max_len,
            item: Box::new(self.item.layout()),
        }
    }

    fn is_shuffled(&self) -> bool {
        self.shuffled
    }

    fn has_shuffle(&self) -> bool {
        self.shuffled || self.item.has_shuffle()
    }

    fn encode(&self, g: &mut Graph<'_, F>, x: &BatchTree, shuffle: &mut Shuffle<'_>) -> Result<Encoded> {
        let (lengths, _) = self.parts(x)?;
        let (len_enc, item_enc) = self.encode_parts(g, x, shuffle)?;
        let perms = self.shuffled.then(|| self.draw_perms(lengths, shuffle));
        self.combine(g, &len_enc, &item_enc, lengths, perms)
    }

    fn decode(&self, g: &mut Graph<'_, F>, cond: NodeId, ctx: &Context) -> Result<DistRep> {
        self.decode_with(g, cond, ctx)
    }

    fn loss(&self, g: &mut Graph<'_, F>, dist: &DistRep, x: &BatchTree, weights: &[F]) -> Result<NodeId> {
        let DistRep::List { length, items, perms } = dist else {
            return Err(Error::Conformance(format!("{}: expected a list distribution", self.name)));
        };
        let (lengths, item_x) = self.parts(x)?;
        if weights.len() != lengths.len() {
            return shape_err("list loss", format!("{} weights for {} rows", weights.len(), lengths.len()));
        }
        let l = self.max_len;
        let len_loss = self.length.loss(g, length, &BatchTree::Leaf(lengths.to_vec()), weights)?;
        let item_w: Vec<F> = lengths
            .iter()
            .zip(weights)
            .flat_map(|(&m, &w)| (0..l).map(move |p| if p < m { w } else { F::zero() }))
            .collect();
        let permuted;
        let item_x = match perms {
            Some(p) => {
                permuted = item_x.select_rows(&perm_index(p, l))?;
                &permuted
            }
            None => item_x,
        };
        let item_loss = self.item.loss(g, items, item_x, &item_w)?;
        Ok(sum_nodes(g, &[len_loss, item_loss])?.expect("two terms"))
    }

    fn sample(&self, params: &ParamStore<F>, cond: &Tensor<F>, rng: &mut dyn RngCore) -> Result<Sampled> {
        let rows = cond.rows();
        let l = self.max_len;
        let pos = self.positional.map(|p| params.get(p));
        let with_pos = |e: Tensor<F>, p: usize| -> Tensor<F> {
            match pos {
                Some(table) => {
                    let d = table.row_len();
                    let mut e = e;
                    for r in 0..e.rows() {
                        for (a, &t) in e.data_mut()[r * d..(r + 1) * d].iter_mut().zip(table.row(p)) {
                            *a += t;
                        }
                    }
                    e
                }
                None => e,
            }
        };
        let mut enc = AttentionCache::new(&self.encoder, rows);
        let mut dec = AttentionCache::new(&self.decoder, rows);
        let len_cond = dec.push(params, &self.decoder, cond)?;
        let lengths = self.length.sample_indices(params, &len_cond, rng)?;
        let e_len = with_pos(
            Codec::<F>::embed(&self.length, params, &BatchTree::Leaf(lengths.clone()))?,
            0,
        );

        let mut item_values: Vec<Vec<Value>> = vec![vec![]; rows];
        let mut item_rows: Vec<Vec<BatchTree>> = vec![vec![]; rows];
        let mut active: Vec<usize> = (0..rows).filter(|&r| lengths[r] > 0).collect();
        if !active.is_empty() {
            enc.retain_rows(&active);
            dec.retain_rows(&active);
            let h = enc.push(params, &self.encoder, &e_len.select_rows(&active))?;
            let mut item_cond = dec.push(params, &self.decoder, &h)?;
            for i in 0..l {
                let s = self.item.sample(params, &item_cond, rng)?;
                for (j, (&r, v)) in active.iter().zip(s.values).enumerate() {
                    item_values[r].push(v);
                    item_rows[r].push(s.batch.select_rows(&[j])?);
                }
                let keep: Vec<usize> = (0..active.len()).filter(|&j| lengths[active[j]] > i + 1).collect();
                if keep.is_empty() {
                    break;
                }
                let e = self.item.embed(params, &s.batch.select_rows(&keep)?)?;
                enc.retain_rows(&keep);
                dec.retain_rows(&keep);
                active = keep.iter().map(|&j| active[j]).collect();
                let h = enc.push(params, &self.encoder, &with_pos(e, i + 1))?;
                item_cond = dec.push(params, &self.decoder, &h)?;
            }
        }

        let item_layout = self.item.layout();
        let mut parts = Vec::with_capacity(rows * 2);
        for (r, batches) in item_rows.into_iter().enumerate() {
            let m = lengths[r];
            parts.extend(batches);
            if m < l {
                parts.push(item_layout.padding(l - m));
            }
        }
        let items = if parts.is_empty() {
            item_layout.padding(0)
        } else {
            BatchTree::concat(&parts)?
        };
        Ok(Sampled {
            values: item_values.into_iter().map(Value::List).collect(),
            batch: BatchTree::List {
                lengths,
                max_len: l,
                items: Box::new(items),
            },
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
            return Err(Error::Config(format!("{} is not a set", self.name)));
        }
        if passes == 0 {
            return Err(Error::Config("shuffle passes must be at least 1".into()));
        }
        let (lengths, _) = self.parts(x)?;
        let (len_enc, item_enc) = self.encode_parts(g, x, &mut Shuffle::Random(&mut *rng))?;
        let mut terms = Vec::with_capacity(passes);
        for _ in 0..passes {
            let perms = self.draw_perms(lengths, &mut Shuffle::Random(&mut *rng));
            let enc = self.combine(g, &len_enc, &item_enc, lengths, Some(perms))?;
            let dist = self.decode_with(g, cond, &enc.context)?;
            terms.push(self.loss(g, &dist, x, weights)?);
        }
        let total = sum_nodes(g, &terms)?.expect("passes ≥ 1");
        Ok(g.scale(total, F::one() / F::from_usize_lossy(passes)))
    }

    fn enumerate(&self, limit: usize) -> Option<Vec<Value>> {
        let items = self.item.enumerate(limit)?;
        let mut out = vec![];
        for m in 0..=self.max_len {
            let slots = vec![items.clone(); m];
            out.extend(product(&slots, limit)?.into_iter().map(Value::List));
            if out.len() > limit {
                return None;
            }
        }
        Some(out)
    }
}
