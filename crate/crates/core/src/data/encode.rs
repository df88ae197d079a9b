//! Mapping raw JSON records to [`Value`]s and back.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use super::Layout;
use crate::codec::{QuantileTable, Value};
use crate::error::{Error, Result};
use crate::schema::{SchemaNode, DEFAULT_BINS};

/// Vocabulary of one categorical column.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub symbols: Vec<String>,
    /// Every observed raw value was a JSON number, so emit numbers.
    #[serde(default)]
    pub numeric: bool,
}

impl Vocab {
    pub fn index(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }
}

/// Fitted vocabularies and quantile tables, keyed by schema path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Encodings {
    vocabs: BTreeMap<String, Vocab>,
    tables: BTreeMap<String, QuantileTable>,
}

/// Prefix of placeholder symbols filling declared but unobserved categories.
pub const UNUSED_SYMBOL: &str = "__unused_";

impl Encodings {
    pub fn vocab(&self, path: &str) -> Option<&Vocab> {
        self.vocabs.get(path)
    }

    pub fn table(&self, path: &str) -> Option<&QuantileTable> {
        self.tables.get(path)
    }

    pub fn set_vocab(&mut self, path: &str, symbols: Vec<String>) {
        self.vocabs.insert(path.to_string(), Vocab { symbols, numeric: false });
    }

    pub fn set_table(&mut self, path: &str, table: QuantileTable) {
        self.tables.insert(path.to_string(), table);
    }

    pub fn vocabs(&self) -> &BTreeMap<String, Vocab> {
        &self.vocabs
    }

    pub fn tables(&self) -> &BTreeMap<String, QuantileTable> {
        &self.tables
    }

    /// Declared cardinality, else the fitted vocabulary size.
    pub fn cardinality(&self, path: &str, node: &SchemaNode) -> Option<usize> {
        match node {
            SchemaNode::Categorical { cardinality: Some(c), .. } => Some(*c),
            SchemaNode::Categorical { symbols: Some(s), .. } => Some(s.len()),
            _ => self.vocab(path).map(|v| v.symbols.len()).filter(|&n| n > 0),
        }
    }

    /// Fits vocabularies and quantile tables on `records`.
    ///
    /// Records must already be structurally valid (see [`check_records`]).
    pub fn fit(schema: &SchemaNode, records: &[Json]) -> Result<Self> {
        let mut obs = Observed::default();
        for r in records {
            observe(schema, schema.name(), r, &mut obs).map_err(|e| Error::Data(e.to_string()))?;
        }
        let mut enc = Encodings::default();
        let mut problems = vec![];
        schema.walk(&mut |path, node| match node {
            SchemaNode::Categorical {
                cardinality,
                symbols,
                ..
            } => {
                let seen = obs.symbols.remove(path).unwrap_or_default();
                let numeric = !seen.is_empty() && seen.values().all(|&n| n);
                let vocab = match symbols {
                    Some(declared) => {
                        if let Some(bad) = seen.keys().find(|s| !declared.contains(s)) {
                            problems.push(format!("{path}: unknown category {bad:?}"));
                        }
                        declared.clone()
                    }
                    None => {
                        let mut v: Vec<String> = seen.keys().cloned().collect();
                        if let Some(c) = cardinality {
                            if v.len() > *c {
                                problems.push(format!(
                                    "{path}: {} distinct categories exceed declared cardinality {c}",
                                    v.len()
                                ));
                            }
                            let mut k = 0;
                            while v.len() < *c {
                                v.push(format!("{UNUSED_SYMBOL}{k}"));
                                k += 1;
                            }
                        }
                        v
                    }
                };
                enc.vocabs.insert(path.to_string(), Vocab { symbols: vocab, numeric });
            }
            SchemaNode::Numerical { bins, integer, .. } => {
                let values = obs.numbers.remove(path).unwrap_or_default();
                if values.is_empty() {
                    problems.push(format!("{path}: no observations for numeric field"));
                    return;
                }
                match QuantileTable::fit(&values, bins.unwrap_or(DEFAULT_BINS), *integer) {
                    Ok(t) => {
                        enc.tables.insert(path.to_string(), t);
                    }
                    Err(e) => problems.push(format!("{path}: {e}")),
                }
            }
            _ => {}
        });
        if !problems.is_empty() {
            return Err(Error::Data(problems.join("; ")));
        }
        Ok(enc)
    }

    /// Converts raw records to values with the fitted encodings.
    pub fn encode(&self, schema: &SchemaNode, records: &[Json]) -> Result<Vec<Value>> {
        records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                to_value(schema, schema.name(), self, r)
                    .map_err(|e| Error::Data(format!("record {}: {e}", i + 1)))
            })
            .collect()
    }

    /// Renders a value as JSON (inverse of [`Encodings::encode`] up to
    /// numeric binning).
    pub fn decode(&self, schema: &SchemaNode, value: &Value) -> Result<Json> {
        to_json(schema, schema.name(), self, value)
    }

    /// Batch layout of `schema` under these encodings.
    pub fn layout(&self, schema: &SchemaNode) -> Result<Layout> {
        layout_of(schema, schema.name(), self)
    }
}

fn layout_of(node: &SchemaNode, path: &str, enc: &Encodings) -> Result<Layout> {
    Ok(match node {
        SchemaNode::Categorical { .. } => Layout::Categorical {
            cardinality: enc
                .cardinality(path, node)
                .ok_or_else(|| Error::Schema(format!("{path}: unknown cardinality")))?,
        },
        SchemaNode::Numerical { .. } => Layout::Numerical(
            enc.table(path)
                .cloned()
                .ok_or_else(|| Error::Schema(format!("{path}: no quantile table")))?,
        ),
        SchemaNode::Struct { fields, .. } => Layout::Struct(
            fields
                .iter()
                .map(|f| layout_of(f, &format!("{path}/{}", f.name()), enc))
                .collect::<Result<_>>()?,
        ),
        SchemaNode::List { max_len, item, .. } => Layout::List {
            max_len: *max_len,
            item: Box::new(layout_of(item, &format!("{path}/{}", item.name()), enc)?),
        },
    })
}

#[derive(Default)]
struct Observed {
    /// symbol → whether it came from a JSON number.
    symbols: BTreeMap<String, BTreeMap<String, bool>>,
    numbers: BTreeMap<String, Vec<f64>>,
}

/// Structural problem with one record.
#[derive(Clone, Debug, PartialEq)]
pub enum RecordIssue {
    Null { path: String },
    TooLong { path: String, len: usize, max_len: usize },
    Malformed { path: String, detail: String },
}

impl std::fmt::Display for RecordIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RecordIssue::Null { path } => write!(f, "null value in column {path}"),
            RecordIssue::TooLong { path, len, max_len } => {
                write!(f, "list {path} has {len} elements, max_len is {max_len}")
            }
            RecordIssue::Malformed { path, detail } => write!(f, "column {path}: {detail}"),
        }
    }
}

fn symbol_of(v: &Json, path: &str) -> Result<(String, bool), RecordIssue> {
    match v {
        Json::String(s) => Ok((s.clone(), false)),
        Json::Number(n) => Ok((n.to_string(), true)),
        Json::Bool(b) => Ok((b.to_string(), false)),
        Json::Null => Err(RecordIssue::Null { path: path.into() }),
        other => Err(RecordIssue::Malformed {
            path: path.into(),
            detail: format!("expected a category, got {other}"),
        }),
    }
}

fn number_of(v: &Json, path: &str) -> Result<f64, RecordIssue> {
    let x = match v {
        Json::Number(n) => n.as_f64(),
        Json::String(s) => s.trim().parse::<f64>().ok(),
        Json::Null => return Err(RecordIssue::Null { path: path.into() }),
        _ => None,
    };
    match x {
        Some(x) if x.is_finite() => Ok(x),
        _ => Err(RecordIssue::Malformed {
            path: path.into(),
            detail: format!("expected a finite number, got {v}"),
        }),
    }
}

fn fields_of<'a>(
    v: &'a Json,
    fields: &'a [SchemaNode],
    path: &str,
) -> Result<Vec<(&'a SchemaNode, &'a Json)>, RecordIssue> {
    let obj = match v {
        Json::Object(o) => o,
        Json::Null => return Err(RecordIssue::Null { path: path.into() }),
        other => {
            return Err(RecordIssue::Malformed {
                path: path.into(),
                detail: format!("expected an object, got {other}"),
            })
        }
    };
    if let Some(extra) = obj.keys().find(|k| !fields.iter().any(|f| f.name() == k.as_str())) {
        return Err(RecordIssue::Malformed {
            path: format!("{path}/{extra}"),
            detail: "column not in schema".into(),
        });
    }
    fields
        .iter()
        .map(|f| {
            obj.get(f.name()).map(|x| (f, x)).ok_or_else(|| RecordIssue::Malformed {
                path: format!("{path}/{}", f.name()),
                detail: "missing column".into(),
            })
        })
        .collect()
}

fn items_of<'a>(v: &'a Json, path: &str, max_len: usize) -> Result<&'a [Json], RecordIssue> {
    match v {
        Json::Array(xs) if xs.len() <= max_len => Ok(xs),
        Json::Array(xs) => Err(RecordIssue::TooLong {
            path: path.into(),
            len: xs.len(),
            max_len,
        }),
        Json::Null => Err(RecordIssue::Null { path: path.into() }),
        other => Err(RecordIssue::Malformed {
            path: path.into(),
            detail: format!("expected an array, got {other}"),
        }),
    }
}

fn observe(node: &SchemaNode, path: &str, v: &Json, obs: &mut Observed) -> Result<(), RecordIssue> {
    match node {
        SchemaNode::Categorical { .. } => {
            let (s, numeric) = symbol_of(v, path)?;
            let e = obs.symbols.entry(path.to_string()).or_default();
            let flag = e.entry(s).or_insert(numeric);
            *flag &= numeric;
        }
        SchemaNode::Numerical { .. } => {
            let x = number_of(v, path)?;
            obs.numbers.entry(path.to_string()).or_default().push(x);
        }
        SchemaNode::Struct { fields, .. } => {
            for (f, x) in fields_of(v, fields, path)? {
                observe(f, &format!("{path}/{}", f.name()), x, obs)?;
            }
        }
        SchemaNode::List { max_len, item, .. } => {
            let child = format!("{path}/{}", item.name());
            for x in items_of(v, path, *max_len)? {
                observe(item, &child, x, obs)?;
            }
        }
    }
    Ok(())
}

/// Structural validation of every record, summarizing rejected rows.
pub fn check_records(schema: &SchemaNode, records: &[Json]) -> Result<()> {
    let mut issues: Vec<(usize, RecordIssue)> = vec![];
    for (i, r) in records.iter().enumerate() {
        let mut scratch = Observed::default();
        if let Err(e) = observe(schema, schema.name(), r, &mut scratch) {
            issues.push((i + 1, e));
        }
    }
    if issues.is_empty() {
        return Ok(());
    }
    let count = |pred: fn(&RecordIssue) -> bool| issues.iter().filter(|(_, e)| pred(e)).count();
    let nulls = count(|e| matches!(e, RecordIssue::Null { .. }));
    let long = count(|e| matches!(e, RecordIssue::TooLong { .. }));
    let malformed = count(|e| matches!(e, RecordIssue::Malformed { .. }));
    let mut parts = vec![];
    if nulls > 0 {
        parts.push(format!("{nulls} rows with nulls"));
    }
    if long > 0 {
        parts.push(format!("{long} rows with lists longer than max_len"));
    }
    if malformed > 0 {
        parts.push(format!("{malformed} malformed rows"));
    }
    let (row, first) = &issues[0];
    Err(Error::Data(format!(
        "{} of {} rows rejected ({}); first at row {row}: {first}",
        issues.len(),
        records.len(),
        parts.join(", ")
    )))
}

fn to_value(node: &SchemaNode, path: &str, enc: &Encodings, v: &Json) -> Result<Value, RecordIssue> {
    Ok(match node {
        SchemaNode::Categorical { .. } => {
            let (s, _) = symbol_of(v, path)?;
            let vocab = enc.vocab(path).ok_or_else(|| RecordIssue::Malformed {
                path: path.into(),
                detail: "no vocabulary fitted".into(),
            })?;
            let k = vocab.index(&s).ok_or_else(|| RecordIssue::Malformed {
                path: path.into(),
                detail: format!("unknown category {s:?}"),
            })?;
            Value::Cat(k)
        }
        SchemaNode::Numerical { .. } => Value::Num(number_of(v, path)?),
        SchemaNode::Struct { fields, .. } => Value::Struct(
            fields_of(v, fields, path)?
                .into_iter()
                .map(|(f, x)| to_value(f, &format!("{path}/{}", f.name()), enc, x))
                .collect::<Result<_, _>>()?,
        ),
        SchemaNode::List { max_len, item, .. } => {
            let child = format!("{path}/{}", item.name());
            Value::List(
                items_of(v, path, *max_len)?
                    .iter()
                    .map(|x| to_value(item, &child, enc, x))
                    .collect::<Result<_, _>>()?,
            )
        }
    })
}

fn symbol_json(vocab: &Vocab, k: usize) -> Json {
    let s = &vocab.symbols[k];
    if vocab.numeric {
        if let Ok(n) = s.parse::<i64>() {
            return Json::from(n);
        }
        if let Some(n) = s.parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
            return Json::Number(n);
        }
    }
    Json::String(s.clone())
}

/// A number as JSON, integral in integer mode.
fn number_json(x: f64, integer: bool) -> Json {
    if integer && x.abs() < 9.0e15 {
        Json::from(x.round() as i64)
    } else {
        serde_json::Number::from_f64(x).map_or(Json::Null, Json::Number)
    }
}

fn to_json(node: &SchemaNode, path: &str, enc: &Encodings, v: &Value) -> Result<Json> {
    let mismatch = || Error::Conformance(format!("{path}: value {v:?} does not match schema"));
    Ok(match (node, v) {
        (SchemaNode::Categorical { .. }, Value::Cat(k)) => {
            let vocab = enc
                .vocab(path)
                .ok_or_else(|| Error::Data(format!("{path}: no vocabulary")))?;
            if *k >= vocab.symbols.len() {
                return Err(Error::IndexOutOfRange {
                    what: "vocabulary",
                    index: *k,
                    size: vocab.symbols.len(),
                });
            }
            symbol_json(vocab, *k)
        }
        (SchemaNode::Numerical { integer, .. }, Value::Num(x)) => number_json(*x, *integer),
        (SchemaNode::Struct { fields, .. }, Value::Struct(xs)) if xs.len() == fields.len() => {
            let mut m = Map::new();
            for (f, x) in fields.iter().zip(xs) {
                m.insert(f.name().to_string(), to_json(f, &format!("{path}/{}", f.name()), enc, x)?);
            }
            Json::Object(m)
        }
        (SchemaNode::List { item, max_len, .. }, Value::List(xs)) if xs.len() <= *max_len => {
            let child = format!("{path}/{}", item.name());
            Json::Array(
                xs.iter()
                    .map(|x| to_json(item, &child, enc, x))
                    .collect::<Result<_>>()?,
            )
        }
        _ => return Err(mismatch()),
    })
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    fn flat() -> SchemaNode {
        SchemaNode::parse(
            r#"{"type":"record","name":"r","fields":[
                {"name":"a","type":"enum"},{"name":"b","type":"enum"},{"name":"x","type":"int","bins":2}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn vocabularies_are_sorted_and_stable() {
        let recs = vec![
            json!({"a": "y", "b": 1, "x": 3}),
            json!({"a": "x", "b": 0, "x": "5"}),
        ];
        let enc = Encodings::fit(&flat(), &recs).unwrap();
        assert_eq!(enc.vocab("r/a").unwrap().symbols, vec!["x", "y"]);
        assert!(enc.vocab("r/b").unwrap().numeric);
        assert!(!enc.vocab("r/a").unwrap().numeric);
        assert_eq!(enc.table("r/x").unwrap().quantiles(), &[3.0, 5.0]);
        let values = enc.encode(&flat(), &recs).unwrap();
        assert_eq!(
            values[0],
            Value::Struct(vec![Value::Cat(1), Value::Cat(1), Value::Num(3.0)])
        );
        let back = enc.decode(&flat(), &values[1]).unwrap();
        assert_eq!(back, json!({"a": "x", "b": 0, "x": 5}));
    }

    #[test]
    fn declared_cardinality_pads_vocabulary() {
        let s = SchemaNode::parse(r#"{"type":"enum","name":"c","cardinality":3}"#).unwrap();
        let enc = Encodings::fit(&s, &[json!("b")]).unwrap();
        assert_eq!(enc.vocab("c").unwrap().symbols.len(), 3);
        assert_eq!(enc.vocab("c").unwrap().symbols[0], "b");
        let too_many = [json!("a"), json!("b"), json!("c"), json!("d")];
        assert!(Encodings::fit(&s, &too_many).is_err());
    }

    #[test]
    fn problems_are_reported_with_counts() {
        let recs = vec![
            json!({"a": null, "b": 1, "x": 3}),
            json!({"a": "x", "b": 0, "x": 1}),
            json!({"a": "x", "b": null, "x": 1}),
            json!({"a": "x", "b": 0}),
        ];
        let err = check_records(&flat(), &recs).unwrap_err().to_string();
        assert!(err.contains("3 of 4 rows rejected"), "{err}");
        assert!(err.contains("2 rows with nulls"), "{err}");
        assert!(err.contains("r/a"), "{err}");
    }

    #[test]
    fn unknown_category_names_the_column() {
        let enc = Encodings::fit(&flat(), &[json!({"a": "x", "b": 0, "x": 1})]).unwrap();
        let err = enc.encode(&flat(), &[json!({"a": "zzz", "b": 0, "x": 1})]).unwrap_err();
        assert!(err.to_string().contains("r/a"));
    }
}
