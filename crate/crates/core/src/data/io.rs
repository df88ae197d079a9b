//! Reading and writing CSV (flat) and JSON-lines (nested) datasets.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde_json::{Map, Value as Json};

use super::encode::{check_records, Encodings};
use super::BatchTree;
use crate::codec::Value;
use crate::error::{Error, Result};
use crate::schema::SchemaNode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guesses from the file extension, defaulting to JSON lines.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" | "json" | "ndjson" => Ok(Format::Jsonl),
            other => Err(Error::Config(format!("unknown format {other:?}; expected csv or jsonl"))),
        }
    }
}

impl std::fmt::Display for Format {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        })
    }
}

fn flat_fields<'a>(schema: &'a SchemaNode, what: &str) -> Result<&'a [SchemaNode]> {
    match schema {
        SchemaNode::Struct { fields, .. } if schema.is_flat() => Ok(fields),
        _ => Err(Error::Config(format!(
            "CSV {what} needs a flat record schema; use jsonl for {}",
            schema.name()
        ))),
    }
}

/// Reads CSV rows as JSON objects keyed by schema field; empty cells
/// become nulls.
pub fn read_csv(reader: impl Read, schema: &SchemaNode) -> Result<Vec<Json>> {
    let fields = flat_fields(schema, "input")?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if let Some(extra) = header.iter().find(|h| !fields.iter().any(|f| f.name() == h.as_str())) {
        return Err(Error::Data(format!("column {extra:?} is not in the schema")));
    }
    let mut columns = Vec::with_capacity(fields.len());
    for f in fields {
        let i = header
            .iter()
            .position(|h| h == f.name())
            .ok_or_else(|| Error::Data(format!("column {:?} is missing from the data", f.name())))?;
        columns.push(i);
    }
    let mut out = vec![];
    for row in rdr.records() {
        let row = row?;
        let mut obj = Map::new();
        for (f, &i) in fields.iter().zip(&columns) {
            let cell = row.get(i).unwrap_or("");
            let v = if cell.is_empty() {
                Json::Null
            } else {
                Json::String(cell.to_string())
            };
            obj.insert(f.name().to_string(), v);
        }
        out.push(Json::Object(obj));
    }
    Ok(out)
}

/// The root value of one file record: struct roots are the object itself,
/// other roots may be bare or wrapped as `{name: value}`.
fn unwrap_root(schema: &SchemaNode, v: Json) -> Json {
    if matches!(schema, SchemaNode::Struct { .. }) {
        return v;
    }
    match v {
        Json::Object(mut o) if o.len() == 1 && o.contains_key(schema.name()) => {
            o.remove(schema.name()).expect("checked")
        }
        other => other,
    }
}

fn wrap_root(schema: &SchemaNode, v: Json) -> Json {
    if matches!(schema, SchemaNode::Struct { .. }) {
        return v;
    }
    let mut m = Map::new();
    m.insert(schema.name().to_string(), v);
    Json::Object(m)
}

/// Reads one JSON record per non-blank line.
pub fn read_jsonl(reader: impl Read, schema: &SchemaNode) -> Result<Vec<Json>> {
    let mut out = vec![];
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Json = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("line {}: malformed JSON: {e}", i + 1)))?;
        out.push(unwrap_root(schema, v));
    }
    Ok(out)
}

pub fn read_records(path: &Path, schema: &SchemaNode, format: Format) -> Result<Vec<Json>> {
    let file = File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    match format {
        Format::Csv => read_csv(file, schema),
        Format::Jsonl => read_jsonl(file, schema),
    }
}

fn cell(v: &Json) -> String {
    match v {
        Json::String(s) => s.clone(),
        Json::Null => String::new(),
        other => other.to_string(),
    }
}

/// Writes records (root values) in `format`.
pub fn write_records(writer: impl Write, schema: &SchemaNode, records: &[Json], format: Format) -> Result<()> {
    match format {
        Format::Csv => {
            let fields = flat_fields(schema, "output")?;
            let mut w = csv::Writer::from_writer(writer);
            w.write_record(fields.iter().map(|f| f.name()))?;
            for r in records {
                w.write_record(fields.iter().map(|f| cell(&r[f.name()])))?;
            }
            w.flush()?;
        }
        Format::Jsonl => {
            let mut w = BufWriter::new(writer);
            for r in records {
                serde_json::to_writer(&mut w, &wrap_root(schema, r.clone()))?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Renders sampled values and writes them to `path`.
pub fn emit(path: &Path, schema: &SchemaNode, enc: &Encodings, values: &[Value], format: Format) -> Result<()> {
    if format == Format::Csv {
        flat_fields(schema, "output")?;
    }
    let records = values
        .iter()
        .map(|v| enc.decode(schema, v))
        .collect::<Result<Vec<_>>>()?;
    let file = File::create(path)?;
    write_records(file, schema, &records, format)
}

/// An ingested dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<Json>,
    pub values: Vec<Value>,
    pub encodings: Encodings,
    pub batch: BatchTree,
}

/// Reads, validates and encodes `path`, fitting vocabularies and quantile
/// tables on it.
pub fn ingest(path: &Path, schema: &SchemaNode, format: Format) -> Result<Dataset> {
    let records = read_records(path, schema, format)?;
    ingest_records(records, schema)
}

pub fn ingest_records(records: Vec<Json>, schema: &SchemaNode) -> Result<Dataset> {
    check_records(schema, &records)?;
    let encodings = Encodings::fit(schema, &records)?;
    let values = encodings.encode(schema, &records)?;
    let batch = encodings.layout(schema)?.batch_values(&values)?;
    Ok(Dataset {
        records,
        values,
        encodings,
        batch,
    })
}

/// Validates and encodes records with encodings fitted elsewhere.
pub fn transform(records: &[Json], schema: &SchemaNode, enc: &Encodings) -> Result<Vec<Value>> {
    check_records(schema, records)?;
    enc.encode(schema, records)
}

/// Groups child rows under their parent's key as a list field
/// (one-to-many). The key column is dropped from the children.
pub fn join(
    parents: &[Json],
    parent_key: &str,
    children: &[Json],
    child_key: &str,
    list_field: &str,
) -> Result<Vec<Json>> {
    let key = |v: &Json, col: &str, what: &str, i: usize| -> Result<String> {
        match v.get(col) {
            Some(Json::Null) | None => Err(Error::Data(format!("{what} row {}: missing key column {col:?}", i + 1))),
            Some(k) => Ok(cell(k)),
        }
    };
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, p) in parents.iter().enumerate() {
        if index.insert(key(p, parent_key, "parent", i)?, i).is_some() {
            return Err(Error::Data(format!("parent row {}: duplicate key", i + 1)));
        }
    }
    let mut groups: Vec<Vec<Json>> = vec![vec![]; parents.len()];
    for (i, c) in children.iter().enumerate() {
        let k = key(c, child_key, "child", i)?;
        let p = *index
            .get(&k)
            .ok_or_else(|| Error::Data(format!("child row {}: no parent with key {k:?}", i + 1)))?;
        let mut c = c.as_object().cloned().unwrap_or_default();
        c.remove(child_key);
        groups[p].push(Json::Object(c));
    }
    Ok(parents
        .iter()
        .zip(groups)
        .map(|(p, items)| {
            let mut p = p.as_object().cloned().unwrap_or_default();
            p.remove(parent_key);
            p.insert(list_field.to_string(), Json::Array(items));
            Json::Object(p)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    fn ab() -> SchemaNode {
        SchemaNode::parse(r#"{"type":"record","name":"r","fields":[{"name":"a","type":"enum"},{"name":"b","type":"enum"}]}"#)
            .unwrap()
    }

    fn reviews() -> SchemaNode {
        SchemaNode::parse(
            r#"{"type":"record","name":"u","fields":[{"name":"reviews","type":"array","max_len":128,
                "items":{"type":"record","name":"review","fields":[{"name":"rating","type":"enum"}]}}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn csv_two_columns() {
        let recs = read_csv("a,b\n0,x\n1,y\n".as_bytes(), &ab()).unwrap();
        let ds = ingest_records(recs, &ab()).unwrap();
        assert_eq!(ds.encodings.vocab("r/a").unwrap().symbols, vec!["0", "1"]);
        assert_eq!(ds.encodings.vocab("r/b").unwrap().symbols, vec!["x", "y"]);
        let BatchTree::Struct(kids) = &ds.batch else { panic!() };
        assert_eq!(kids[0], BatchTree::Leaf(vec![0, 1]));
        assert_eq!(kids[1], BatchTree::Leaf(vec![0, 1]));
    }

    #[test]
    fn csv_column_mismatch_names_the_column() {
        let err = read_csv("a,c\n0,x\n".as_bytes(), &ab()).unwrap_err().to_string();
        assert!(err.contains("\"c\""), "{err}");
        let err = read_csv("a\n0\n".as_bytes(), &ab()).unwrap_err().to_string();
        assert!(err.contains("\"b\""), "{err}");
    }

    #[test]
    fn csv_nulls_are_counted() {
        let recs = read_csv("a,b\n0,\n,y\n1,y\n".as_bytes(), &ab()).unwrap();
        let err = ingest_records(recs, &ab()).unwrap_err().to_string();
        assert!(err.contains("2 of 3 rows rejected"), "{err}");
    }

    #[test]
    fn empty_list_is_fully_masked() {
        let recs = read_jsonl(r#"{"reviews":[]}"#.as_bytes(), &reviews()).unwrap();
        let mut s = reviews();
        // an empty dataset has no categories to fit
        if let SchemaNode::Struct { fields, .. } = &mut s {
            if let SchemaNode::List { item, .. } = &mut fields[0] {
                if let SchemaNode::Struct { fields, .. } = item.as_mut() {
                    fields[0] = SchemaNode::parse(r#"{"type":"enum","name":"rating","cardinality":5}"#).unwrap();
                }
            }
        }
        let ds = ingest_records(recs, &s).unwrap();
        let BatchTree::Struct(kids) = &ds.batch else { panic!() };
        let BatchTree::List { lengths, .. } = &kids[0] else { panic!() };
        assert_eq!(lengths, &vec![0]);
        assert!(kids[0].mask().unwrap().iter().all(|m| !m));
    }

    #[test]
    fn list_lengths_and_masks_follow_the_file() {
        let lens = [1usize, 2, 128];
        let text: String = lens
            .iter()
            .map(|&n| {
                let items: Vec<Json> = (0..n).map(|i| json!({"rating": (i % 5) + 1})).collect();
                format!("{}\n", json!({ "reviews": items }))
            })
            .collect();
        let recs = read_jsonl(text.as_bytes(), &reviews()).unwrap();
        let ds = ingest_records(recs, &reviews()).unwrap();
        let BatchTree::Struct(kids) = &ds.batch else { panic!() };
        let BatchTree::List { lengths, max_len, .. } = &kids[0] else { panic!() };
        assert_eq!(lengths, &lens.to_vec());
        let mask = kids[0].mask().unwrap();
        for (b, &n) in lens.iter().enumerate() {
            let row = &mask[b * max_len..(b + 1) * max_len];
            assert_eq!(row.iter().filter(|&&m| m).count(), n);
        }
    }

    #[test]
    fn over_long_lists_are_rejected_with_count() {
        let s = SchemaNode::parse(r#"{"type":"array","name":"xs","max_len":2,"items":{"type":"enum","name":"x"}}"#).unwrap();
        let recs = read_jsonl("[1]\n[1,2,3]\n{\"xs\":[1,1,1,1]}\n".as_bytes(), &s).unwrap();
        let err = ingest_records(recs, &s).unwrap_err().to_string();
        assert!(err.contains("2 rows with lists longer than max_len"), "{err}");
    }

    #[test]
    fn ingest_emit_round_trips_categoricals() {
        let text = "a,b\n0,x\n1,y\n1,\"x,z\"\n";
        let recs = read_csv(text.as_bytes(), &ab()).unwrap();
        let ds = ingest_records(recs, &ab()).unwrap();
        let back: Vec<Json> = ds.values.iter().map(|v| ds.encodings.decode(&ab(), v).unwrap()).collect();
        let mut out = vec![];
        write_records(&mut out, &ab(), &back, Format::Csv).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn empty_csv_still_has_a_header() {
        let mut out = vec![];
        write_records(&mut out, &ab(), &[], Format::Csv).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "a,b\n");
    }

    #[test]
    fn csv_output_refuses_nested_schemas() {
        let mut out = vec![];
        assert!(write_records(&mut out, &reviews(), &[], Format::Csv).is_err());
    }

    #[test]
    fn empty_list_emits_brackets() {
        let mut out = vec![];
        write_records(&mut out, &reviews(), &[json!({"reviews": []})], Format::Jsonl).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "{\"reviews\":[]}\n");
    }

    #[test]
    fn join_groups_children_by_key() {
        let users = vec![json!({"id": 1, "Age": 30}), json!({"id": 2, "Age": 40})];
        let tx = vec![
            json!({"user": 2, "Price": 1.0}),
            json!({"user": 1, "Price": 2.0}),
            json!({"user": 2, "Price": 3.0}),
        ];
        let joined = join(&users, "id", &tx, "user", "transactions").unwrap();
        assert_eq!(joined[0], json!({"Age": 30, "transactions": [{"Price": 2.0}]}));
        assert_eq!(joined[1], json!({"Age": 40, "transactions": [{"Price": 1.0}, {"Price": 3.0}]}));
        let orphan = vec![json!({"user": 9})];
        assert!(join(&users, "id", &orphan, "user", "t").is_err());
    }

    #[test]
    fn ingest_is_deterministic() {
        let text = "a,b\n1,y\n0,x\n1,x\n";
        let one = ingest_records(read_csv(text.as_bytes(), &ab()).unwrap(), &ab()).unwrap();
        let two = ingest_records(read_csv(text.as_bytes(), &ab()).unwrap(), &ab()).unwrap();
        assert_eq!(one.batch, two.batch);
        assert_eq!(one.encodings, two.encodings);
    }
}
