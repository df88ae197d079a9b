//! Schema-transposed batch layout.
//!
//! Containers (structs, lists) sit outside the arrays: a struct of `B`
//! observations is a struct of `B`-row children, and a list of `B`
//! observations holds `B` lengths plus an item tree of `B × max_len` rows in
//! row-major `(observation, position)` order. Rows past an observation's
//! length are padding; their contents are arbitrary and masked everywhere.

use crate::codec::{QuantileTable, Value};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BatchTree {
    /// Category (or quantile bin) index per row.
    Leaf(Vec<usize>),
    Struct(Vec<BatchTree>),
    List {
        lengths: Vec<usize>,
        max_len: usize,
        items: Box<BatchTree>,
    },
}

/// Row indices of the item tree for outer rows `rows`, each expanded to
/// `max_len` consecutive positions.
pub(crate) fn expand_rows(rows: &[usize], max_len: usize) -> Vec<usize> {
    rows.iter()
        .flat_map(|&r| (r * max_len)..(r * max_len + max_len))
        .collect()
}

impl BatchTree {
    /// Number of observations (outermost extent).
    pub fn rows(&self) -> usize {
        match self {
            BatchTree::Leaf(v) => v.len(),
            BatchTree::Struct(children) => children.first().map_or(0, BatchTree::rows),
            BatchTree::List { lengths, .. } => lengths.len(),
        }
    }

    /// Validity of each item row of a list node: `mask[b * max_len + p]`
    /// is true iff `p < lengths[b]`.
    pub fn mask(&self) -> Option<Vec<bool>> {
        match self {
            BatchTree::List {
                lengths, max_len, ..
            } => Some(
                lengths
                    .iter()
                    .flat_map(|&m| (0..*max_len).map(move |p| p < m))
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Checks extents and masks throughout the tree.
    pub fn validate(&self) -> Result<()> {
        match self {
            BatchTree::Leaf(_) => Ok(()),
            BatchTree::Struct(children) => {
                let n = self.rows();
                for c in children {
                    if c.rows() != n {
                        return Err(Error::Conformance(format!(
                            "struct children have {} and {n} rows",
                            c.rows()
                        )));
                    }
                    c.validate()?;
                }
                Ok(())
            }
            BatchTree::List {
                lengths,
                max_len,
                items,
            } => {
                if let Some(&m) = lengths.iter().find(|&&m| m > *max_len) {
                    return Err(Error::Conformance(format!(
                        "list length {m} exceeds max_len {max_len}"
                    )));
                }
                if items.rows() != lengths.len() * max_len {
                    return Err(Error::Conformance(format!(
                        "list items have {} rows, expected {}",
                        items.rows(),
                        lengths.len() * max_len
                    )));
                }
                items.validate()
            }
        }
    }

    /// Selects observations by index (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Result<BatchTree> {
        let n = self.rows();
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::IndexOutOfRange {
                what: "batch rows",
                index: r,
                size: n,
            });
        }
        Ok(self.select_unchecked(rows))
    }

    fn select_unchecked(&self, rows: &[usize]) -> BatchTree {
        match self {
            BatchTree::Leaf(v) => BatchTree::Leaf(rows.iter().map(|&r| v[r]).collect()),
            BatchTree::Struct(children) => {
                BatchTree::Struct(children.iter().map(|c| c.select_unchecked(rows)).collect())
            }
            BatchTree::List {
                lengths,
                max_len,
                items,
            } => BatchTree::List {
                lengths: rows.iter().map(|&r| lengths[r]).collect(),
                max_len: *max_len,
                items: Box::new(items.select_unchecked(&expand_rows(rows, *max_len))),
            },
        }
    }

    /// Stacks batches with identical structure, rows in order.
    pub fn concat(parts: &[BatchTree]) -> Result<BatchTree> {
        let Some(first) = parts.first() else {
            return Err(Error::Conformance("concat of zero batches".into()));
        };
        match first {
            BatchTree::Leaf(_) => {
                let mut out = vec![];
                for p in parts {
                    match p {
                        BatchTree::Leaf(v) => out.extend_from_slice(v),
                        _ => return Err(Error::Conformance("concat of mixed batch kinds".into())),
                    }
                }
                Ok(BatchTree::Leaf(out))
            }
            BatchTree::Struct(children) => {
                let mut cols: Vec<Vec<BatchTree>> = vec![vec![]; children.len()];
                for p in parts {
                    match p {
                        BatchTree::Struct(cs) if cs.len() == children.len() => {
                            for (col, c) in cols.iter_mut().zip(cs) {
                                col.push(c.clone());
                            }
                        }
                        _ => return Err(Error::Conformance("concat of mixed batch kinds".into())),
                    }
                }
                let children = cols
                    .iter()
                    .map(|c| BatchTree::concat(c))
                    .collect::<Result<_>>()?;
                Ok(BatchTree::Struct(children))
            }
            BatchTree::List { max_len, .. } => {
                let mut lengths = vec![];
                let mut items = vec![];
                for p in parts {
                    match p {
                        BatchTree::List {
                            lengths: l,
                            max_len: m,
                            items: it,
                        } if m == max_len => {
                            lengths.extend_from_slice(l);
                            items.push((**it).clone());
                        }
                        _ => return Err(Error::Conformance("concat of mixed batch kinds".into())),
                    }
                }
                Ok(BatchTree::List {
                    lengths,
                    max_len: *max_len,
                    items: Box::new(BatchTree::concat(&items)?),
                })
            }
        }
    }
}

/// Shape information needed to turn [`Value`]s into a [`BatchTree`].
#[derive(Clone, Debug, PartialEq)]
pub enum Layout {
    Categorical { cardinality: usize },
    Numerical(QuantileTable),
    Struct(Vec<Layout>),
    List { max_len: usize, item: Box<Layout> },
}

impl Layout {
    /// An all-padding batch of `rows` observations.
    pub fn padding(&self, rows: usize) -> BatchTree {
        match self {
            Layout::Categorical { .. } | Layout::Numerical(_) => BatchTree::Leaf(vec![0; rows]),
            Layout::Struct(children) => {
                BatchTree::Struct(children.iter().map(|c| c.padding(rows)).collect())
            }
            Layout::List { max_len, item } => BatchTree::List {
                lengths: vec![0; rows],
                max_len: *max_len,
                items: Box::new(item.padding(rows * max_len)),
            },
        }
    }

    /// Builds the batch for `values`; `None` rows become padding.
    pub fn batch(&self, values: &[Option<&Value>]) -> Result<BatchTree> {
        match self {
            Layout::Categorical { cardinality } => {
                let mut out = Vec::with_capacity(values.len());
                for v in values {
                    out.push(match v {
                        None => 0,
                        Some(Value::Cat(k)) if k < cardinality => *k,
                        Some(Value::Cat(k)) => {
                            return Err(Error::IndexOutOfRange {
                                what: "category",
                                index: *k,
                                size: *cardinality,
                            })
                        }
                        Some(other) => {
                            return Err(Error::Conformance(format!(
                                "expected a category, got {other:?}"
                            )))
                        }
                    });
                }
                Ok(BatchTree::Leaf(out))
            }
            Layout::Numerical(table) => {
                let mut out = Vec::with_capacity(values.len());
                for v in values {
                    out.push(match v {
                        None => 0,
                        Some(Value::Num(x)) => table.bin(*x)?,
                        Some(other) => {
                            return Err(Error::Conformance(format!(
                                "expected a number, got {other:?}"
                            )))
                        }
                    });
                }
                Ok(BatchTree::Leaf(out))
            }
            Layout::Struct(children) => {
                let mut fields: Vec<Vec<Option<&Value>>> = vec![Vec::with_capacity(values.len()); children.len()];
                for v in values {
                    match v {
                        None => fields.iter_mut().for_each(|f| f.push(None)),
                        Some(Value::Struct(xs)) if xs.len() == children.len() => {
                            for (f, x) in fields.iter_mut().zip(xs) {
                                f.push(Some(x));
                            }
                        }
                        Some(other) => {
                            return Err(Error::Conformance(format!(
                                "expected a struct of {} fields, got {other:?}",
                                children.len()
                            )))
                        }
                    }
                }
                let children = children
                    .iter()
                    .zip(&fields)
                    .map(|(c, f)| c.batch(f))
                    .collect::<Result<_>>()?;
                Ok(BatchTree::Struct(children))
            }
            Layout::List { max_len, item } => {
                let mut lengths = Vec::with_capacity(values.len());
                let mut items: Vec<Option<&Value>> = Vec::with_capacity(values.len() * max_len);
                for v in values {
                    match v {
                        None => {
                            lengths.push(0);
                            items.extend(std::iter::repeat_n(None, *max_len));
                        }
                        Some(Value::List(xs)) => {
                            if xs.len() > *max_len {
                                return Err(Error::Conformance(format!(
                                    "list of length {} exceeds max_len {max_len}",
                                    xs.len()
                                )));
                            }
                            lengths.push(xs.len());
                            items.extend(xs.iter().map(Some));
                            items.extend(std::iter::repeat_n(None, max_len - xs.len()));
                        }
                        Some(other) => {
                            return Err(Error::Conformance(format!("expected a list, got {other:?}")))
                        }
                    }
                }
                Ok(BatchTree::List {
                    lengths,
                    max_len: *max_len,
                    items: Box::new(item.batch(&items)?),
                })
            }
        }
    }

    pub fn batch_values(&self, values: &[Value]) -> Result<BatchTree> {
        let refs: Vec<Option<&Value>> = values.iter().map(Some).collect();
        self.batch(&refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list_layout() -> Layout {
        Layout::List {
            max_len: 3,
            item: Box::new(Layout::Categorical { cardinality: 4 }),
        }
    }

    #[test]
    fn list_batch_pads_and_masks() {
        let values = vec![
            Value::List(vec![Value::Cat(1)]),
            Value::List(vec![]),
            Value::List(vec![Value::Cat(3), Value::Cat(2), Value::Cat(0)]),
        ];
        let b = list_layout().batch_values(&values).unwrap();
        b.validate().unwrap();
        let mask = b.mask().unwrap();
        assert_eq!(
            mask,
            vec![true, false, false, false, false, false, true, true, true]
        );
        match &b {
            BatchTree::List { lengths, items, .. } => {
                assert_eq!(lengths, &vec![1, 0, 3]);
                assert_eq!(**items, BatchTree::Leaf(vec![1, 0, 0, 0, 0, 0, 3, 2, 0]));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn overlong_list_rejected() {
        let v = Value::List(vec![Value::Cat(0); 4]);
        assert!(list_layout().batch_values(&[v]).is_err());
    }

    #[test]
    fn select_then_concat_roundtrip() {
        let values = vec![
            Value::List(vec![Value::Cat(1)]),
            Value::List(vec![Value::Cat(2), Value::Cat(2)]),
        ];
        let b = list_layout().batch_values(&values).unwrap();
        let parts = [b.select_rows(&[0]).unwrap(), b.select_rows(&[1]).unwrap()];
        assert_eq!(BatchTree::concat(&parts).unwrap(), b);
        let swapped = b.select_rows(&[1, 0]).unwrap();
        let expect = list_layout()
            .batch_values(&[values[1].clone(), values[0].clone()])
            .unwrap();
        assert_eq!(swapped, expect);
    }
}
