//! The declarative type language: an avro-flavored JSON dialect parsed
//! into [`SchemaNode`]s and compiled into a codec tree.
//!
//! ```json
//! {"type": "record", "name": "User", "fields": [
//!   {"name": "Age", "type": "float"},
//!   {"name": "Sex", "type": "enum"},
//!   {"name": "transactions", "type": "array", "max_len": 16,
//!    "items": {"type": "record", "name": "transaction", "fields": [...]}}]}
//! ```
//!
//! `record` maps to a struct, `array` to a list (`max_len` is required),
//! `enum` to a categorical (`symbols` or `cardinality`, or inferred from
//! data), `float`/`double` to a numerical and `int`/`long` to an integer
//! numerical. `shuffled: true` selects the shuffled struct or set codec.

use std::collections::{BTreeMap, HashSet};

use rand::RngCore;
use serde_json::{json, Map, Value as Json};

use crate::codec::{CategoricalCodec, Codec, CodecTree, ListCodec, NumericalCodec, StructCodec};
use crate::data::Encodings;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, TransformerConfig};

pub const DEFAULT_BINS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SchemaNode {
    Categorical {
        name: String,
        /// Declared cardinality; `None` when it is left to ingestion.
        cardinality: Option<usize>,
        symbols: Option<Vec<String>>,
    },
    Numerical {
        name: String,
        bins: Option<usize>,
        integer: bool,
    },
    Struct {
        name: String,
        fields: Vec<SchemaNode>,
        shuffled: bool,
    },
    List {
        name: String,
        max_len: usize,
        item: Box<SchemaNode>,
        shuffled: bool,
    },
}

fn schema_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Schema(msg.into()))
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return schema_err("empty name");
    }
    if name.contains('/') || name.starts_with('@') {
        return schema_err(format!("name {name:?} may not contain '/' or start with '@'"));
    }
    Ok(())
}

fn get_usize(obj: &Map<String, Json>, key: &str, ctx: &str) -> Result<Option<usize>> {
    match obj.get(key) {
        None | Some(Json::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .map(|n| Some(n as usize))
            .ok_or_else(|| Error::Schema(format!("{ctx}: `{key}` must be a non-negative integer"))),
    }
}

fn get_bool(obj: &Map<String, Json>, key: &str, ctx: &str) -> Result<bool> {
    match obj.get(key) {
        None | Some(Json::Null) => Ok(false),
        Some(Json::Bool(b)) => Ok(*b),
        Some(_) => schema_err(format!("{ctx}: `{key}` must be a boolean")),
    }
}

struct Parser {
    /// Named record/enum types seen so far, by type name.
    named: BTreeMap<String, SchemaNode>,
    /// Type names currently being defined.
    open: Vec<String>,
}

impl Parser {
    fn node(&mut self, v: &Json, field_name: Option<&str>) -> Result<SchemaNode> {
        match v {
            Json::String(tag) => {
                let name = field_name.unwrap_or("item");
                let mut obj = Map::new();
                obj.insert("type".into(), Json::String(tag.clone()));
                obj.insert("name".into(), Json::String(name.to_string()));
                self.object(&obj)
            }
            Json::Object(obj) => {
                let mut obj = obj.clone();
                if let Some(name) = field_name {
                    if !obj.contains_key("name") {
                        obj.insert("name".into(), Json::String(name.to_string()));
                    }
                }
                self.object(&obj)
            }
            other => schema_err(format!("expected a type object or tag, got {other}")),
        }
    }

    fn object(&mut self, obj: &Map<String, Json>) -> Result<SchemaNode> {
        let name = match obj.get("name") {
            Some(Json::String(s)) => s.clone(),
            Some(_) => return schema_err("`name` must be a string"),
            None => "item".to_string(),
        };
        let ty = obj
            .get("type")
            .ok_or_else(|| Error::Schema(format!("{name}: missing `type`")))?;
        match ty {
            Json::Object(inner) => {
                // field wrapper around a full type: the field name wins, other
                // attributes fill in what the inner type leaves out
                let mut merged = inner.clone();
                for (k, v) in obj {
                    if k == "type" {
                        continue;
                    }
                    if k == "name" || !merged.contains_key(k) {
                        merged.insert(k.clone(), v.clone());
                    }
                }
                let type_name = inner.get("name").and_then(Json::as_str).map(str::to_string);
                let node = self.with_open(type_name.as_deref(), |p| p.object(&merged))?;
                if let Some(t) = type_name {
                    self.named.entry(t).or_insert_with(|| node.clone());
                }
                Ok(node)
            }
            Json::String(tag) => self.tagged(tag, &name, obj),
            _ => schema_err(format!("{name}: `type` must be a string or an object")),
        }
    }

    fn with_open<T>(&mut self, type_name: Option<&str>, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        if let Some(t) = type_name {
            self.open.push(t.to_string());
        }
        let out = f(self);
        if type_name.is_some() {
            self.open.pop();
        }
        out
    }

    fn tagged(&mut self, tag: &str, name: &str, obj: &Map<String, Json>) -> Result<SchemaNode> {
        check_name(name)?;
        let node = match tag {
            "record" => {
                let fields = match obj.get("fields") {
                    Some(Json::Array(fs)) => fs,
                    _ => return schema_err(format!("{name}: record needs a `fields` array")),
                };
                if fields.is_empty() {
                    return schema_err(format!("{name}: record has no fields"));
                }
                let shuffled = get_bool(obj, "shuffled", name)?;
                let type_name = if self.open.last().map(String::as_str) == Some(name) {
                    None
                } else {
                    Some(name)
                };
                let parsed = self.with_open(type_name, |p| {
                    fields.iter().map(|f| p.node(f, None)).collect::<Result<Vec<_>>>()
                })?;
                let mut seen = HashSet::new();
                for f in &parsed {
                    if !seen.insert(f.name().to_string()) {
                        return schema_err(format!("{name}: duplicate field name {:?}", f.name()));
                    }
                }
                SchemaNode::Struct {
                    name: name.to_string(),
                    fields: parsed,
                    shuffled,
                }
            }
            "array" => {
                let max_len = get_usize(obj, "max_len", name)?
                    .ok_or_else(|| Error::Schema(format!("{name}: array needs `max_len`")))?;
                if max_len == 0 {
                    return schema_err(format!("{name}: max_len must be at least 1"));
                }
                let items = obj
                    .get("items")
                    .ok_or_else(|| Error::Schema(format!("{name}: array needs `items`")))?;
                let item = self.node(items, None)?;
                SchemaNode::List {
                    name: name.to_string(),
                    max_len,
                    item: Box::new(item),
                    shuffled: get_bool(obj, "shuffled", name)?,
                }
            }
            "enum" => {
                let symbols = match obj.get("symbols") {
                    None | Some(Json::Null) => None,
                    Some(Json::Array(xs)) => Some(
                        xs.iter()
                            .map(|x| match x {
                                Json::String(s) => Ok(s.clone()),
                                Json::Number(n) => Ok(n.to_string()),
                                _ => schema_err(format!("{name}: symbols must be strings")),
                            })
                            .collect::<Result<Vec<_>>>()?,
                    ),
                    Some(_) => return schema_err(format!("{name}: `symbols` must be an array")),
                };
                let cardinality = get_usize(obj, "cardinality", name)?;
                if let Some(s) = &symbols {
                    let unique: HashSet<&String> = s.iter().collect();
                    if unique.len() != s.len() {
                        return schema_err(format!("{name}: duplicate symbols"));
                    }
                    if s.is_empty() {
                        return schema_err(format!("{name}: empty symbol list"));
                    }
                    if cardinality.is_some_and(|c| c != s.len()) {
                        return schema_err(format!("{name}: cardinality disagrees with symbols"));
                    }
                }
                if cardinality == Some(0) {
                    return schema_err(format!("{name}: cardinality must be at least 1"));
                }
                SchemaNode::Categorical {
                    name: name.to_string(),
                    cardinality: cardinality.or(symbols.as_ref().map(Vec::len)),
                    symbols,
                }
            }
            "float" | "double" | "int" | "long" => {
                let bins = get_usize(obj, "bins", name)?;
                if bins.is_some_and(|b| b < 2) {
                    return schema_err(format!("{name}: bins must be at least 2"));
                }
                SchemaNode::Numerical {
                    name: name.to_string(),
                    bins,
                    integer: matches!(tag, "int" | "long"),
                }
            }
            other => {
                if self.open.iter().any(|t| t == other) {
                    return schema_err(format!("{name}: recursive reference to {other:?} is not supported"));
                }
                match self.named.get(other) {
                    Some(node) => node.clone().renamed(name),
                    None => return schema_err(format!("{name}: unknown type {other:?}")),
                }
            }
        };
        if matches!(tag, "record" | "enum") && !self.named.contains_key(name) {
            self.named.insert(name.to_string(), node.clone());
        }
        Ok(node)
    }
}

impl SchemaNode {
    /// Parses a schema document.
    pub fn parse(text: &str) -> Result<Self> {
        let v: Json = serde_json::from_str(text)?;
        Self::from_json(&v)
    }

    pub fn from_json(v: &Json) -> Result<Self> {
        let mut p = Parser {
            named: BTreeMap::new(),
            open: vec![],
        };
        p.node(v, None)
    }

    pub fn to_json(&self) -> Json {
        match self {
            SchemaNode::Categorical {
                name,
                cardinality,
                symbols,
            } => {
                let mut o = json!({"type": "enum", "name": name});
                if let Some(c) = cardinality {
                    o["cardinality"] = json!(c);
                }
                if let Some(s) = symbols {
                    o["symbols"] = json!(s);
                }
                o
            }
            SchemaNode::Numerical { name, bins, integer } => {
                let mut o = json!({"type": if *integer { "int" } else { "double" }, "name": name});
                if let Some(b) = bins {
                    o["bins"] = json!(b);
                }
                o
            }
            SchemaNode::Struct {
                name,
                fields,
                shuffled,
            } => {
                let mut o = json!({
                    "type": "record",
                    "name": name,
                    "fields": fields.iter().map(SchemaNode::to_json).collect::<Vec<_>>(),
                });
                if *shuffled {
                    o["shuffled"] = json!(true);
                }
                o
            }
            SchemaNode::List {
                name,
                max_len,
                item,
                shuffled,
            } => {
                let mut o = json!({"type": "array", "name": name, "max_len": max_len, "items": item.to_json()});
                if *shuffled {
                    o["shuffled"] = json!(true);
                }
                o
            }
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("schema JSON is always serializable")
    }

    pub fn name(&self) -> &str {
        match self {
            SchemaNode::Categorical { name, .. }
            | SchemaNode::Numerical { name, .. }
            | SchemaNode::Struct { name, .. }
            | SchemaNode::List { name, .. } => name,
        }
    }

    fn renamed(mut self, new: &str) -> Self {
        match &mut self {
            SchemaNode::Categorical { name, .. }
            | SchemaNode::Numerical { name, .. }
            | SchemaNode::Struct { name, .. }
            | SchemaNode::List { name, .. } => *name = new.to_string(),
        }
        self
    }

    /// A struct whose fields are all categorical or numerical.
    pub fn is_flat(&self) -> bool {
        match self {
            SchemaNode::Struct { fields, .. } => fields
                .iter()
                .all(|f| matches!(f, SchemaNode::Categorical { .. } | SchemaNode::Numerical { .. })),
            _ => false,
        }
    }

    pub fn is_shuffled(&self) -> bool {
        match self {
            SchemaNode::Struct { shuffled, .. } | SchemaNode::List { shuffled, .. } => *shuffled,
            _ => false,
        }
    }

    /// Visits every node with its slash path, parents first.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&str, &'a SchemaNode)) {
        fn go<'a>(n: &'a SchemaNode, path: &str, f: &mut dyn FnMut(&str, &'a SchemaNode)) {
            f(path, n);
            match n {
                SchemaNode::Struct { fields, .. } => {
                    for c in fields {
                        go(c, &format!("{path}/{}", c.name()), f);
                    }
                }
                SchemaNode::List { item, .. } => go(item, &format!("{path}/{}", item.name()), f),
                _ => {}
            }
        }
        go(self, self.name(), f)
    }
}

/// Knobs for [`compile`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CompileOptions {
    pub transformer: TransformerConfig,
    /// Whether `c0` is trained along with everything else.
    pub trainable_c0: bool,
    /// Learned positional embeddings on list encoder inputs.
    pub positional: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::default(),
            trainable_c0: true,
            positional: false,
        }
    }
}

/// Builds the codec tree for `schema`, registering fresh parameters.
///
/// Cardinalities and quantile tables missing from the schema are taken
/// from `encodings`, keyed by node path.
pub fn compile<F: Scalar>(
    schema: &SchemaNode,
    encodings: &Encodings,
    opts: &CompileOptions,
    rng: &mut dyn RngCore,
) -> Result<(CodecTree<F>, ParamStore<F>)> {
    opts.transformer.validate()?;
    let mut store = ParamStore::new();
    let root = build_node(schema, schema.name(), encodings, opts, &mut store, rng)?;
    let tree = CodecTree::new(&mut store, root, opts.transformer.width, opts.trainable_c0)?;
    Ok((tree, store))
}

/// Builds the codec for one schema node at `path`, registering its
/// parameters in `store`.
pub fn build_node<F: Scalar>(
    node: &SchemaNode,
    path: &str,
    enc: &Encodings,
    opts: &CompileOptions,
    store: &mut ParamStore<F>,
    rng: &mut dyn RngCore,
) -> Result<Box<dyn Codec<F>>> {
    let cfg = &opts.transformer;
    Ok(match node {
        SchemaNode::Categorical { name, .. } => {
            let n = enc.cardinality(path, node).ok_or_else(|| {
                Error::Schema(format!(
                    "{path}: cardinality is neither declared nor inferred from data"
                ))
            })?;
            Box::new(CategoricalCodec::new(store, path, name, n, cfg.width, cfg.init_std, rng)?)
        }
        SchemaNode::Numerical { name, .. } => {
            let table = enc
                .table(path)
                .ok_or_else(|| Error::Schema(format!("{path}: no quantile table for numeric field")))?;
            Box::new(NumericalCodec::new(store, path, name, table.clone(), cfg.width, cfg.init_std, rng)?)
        }
        SchemaNode::Struct {
            name,
            fields,
            shuffled,
        } => {
            let children = fields
                .iter()
                .map(|f| build_node(f, &format!("{path}/{}", f.name()), enc, opts, store, rng))
                .collect::<Result<Vec<_>>>()?;
            Box::new(StructCodec::new(store, path, name, children, cfg, *shuffled, rng)?)
        }
        SchemaNode::List {
            name,
            max_len,
            item,
            shuffled,
        } => {
            let child = build_node(item, &format!("{path}/{}", item.name()), enc, opts, store, rng)?;
            Box::new(ListCodec::new(
                store,
                path,
                name,
                *max_len,
                child,
                cfg,
                *shuffled,
                opts.positional,
                rng,
            )?)
        }
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::codec::QuantileTable;

    pub(crate) const USERS: &str = r#"{
      "type": "record", "name": "User",
      "fields": [
        {"name": "Age", "type": "float"},
        {"name": "Sex", "type": "enum"},
        {"name": "transactions", "type": "array", "max_len": 8,
         "items": {"type": "record", "name": "transaction",
                   "fields": [{"name": "Place", "type": "enum"},
                              {"name": "Price", "type": "float"}]}}
      ]
    }"#;

    const NETFLIX: &str = r#"{
      "type": "array", "name": "user", "max_len": 128, "shuffled": true,
      "items": {"type": "record", "name": "review", "fields": [
        {"name": "movie", "type": {"type": "record", "name": "movie", "fields": [
          {"name": "release_year", "type": "enum", "cardinality": 94},
          {"name": "title", "type": "enum", "cardinality": 4500}]}},
        {"name": "year", "type": "enum", "cardinality": 7},
        {"name": "rating", "type": "enum", "cardinality": 5}]}
    }"#;

    #[test]
    fn parses_the_users_schema() {
        let s = SchemaNode::parse(USERS).unwrap();
        let cat = |n: &str| SchemaNode::Categorical {
            name: n.into(),
            cardinality: None,
            symbols: None,
        };
        let num = |n: &str| SchemaNode::Numerical {
            name: n.into(),
            bins: None,
            integer: false,
        };
        let expect = SchemaNode::Struct {
            name: "User".into(),
            shuffled: false,
            fields: vec![
                num("Age"),
                cat("Sex"),
                SchemaNode::List {
                    name: "transactions".into(),
                    max_len: 8,
                    shuffled: false,
                    item: Box::new(SchemaNode::Struct {
                        name: "transaction".into(),
                        shuffled: false,
                        fields: vec![cat("Place"), num("Price")],
                    }),
                },
            ],
        };
        assert_eq!(s, expect);
    }

    #[test]
    fn parses_the_netflix_schema() {
        let s = SchemaNode::parse(NETFLIX).unwrap();
        let SchemaNode::List {
            item, shuffled, max_len, ..
        } = &s
        else {
            panic!("{s:?}")
        };
        assert!(*shuffled);
        assert_eq!(*max_len, 128);
        let mut cards = vec![];
        item.walk(&mut |_, n| {
            if let SchemaNode::Categorical { cardinality, .. } = n {
                cards.push(cardinality.unwrap());
            }
        });
        assert_eq!(cards, vec![94, 4500, 7, 5]);
    }

    #[test]
    fn minimal_enum() {
        let s = SchemaNode::parse(r#"{"type":"enum","name":"x","cardinality":1}"#).unwrap();
        assert_eq!(
            s,
            SchemaNode::Categorical {
                name: "x".into(),
                cardinality: Some(1),
                symbols: None
            }
        );
    }

    #[test]
    fn rejects_bad_documents() {
        let bad = [
            r#"{"type":"blob","name":"x"}"#,
            r#"{"type":"array","name":"x","items":"int"}"#,
            r#"{"type":"record","name":"r","fields":[{"name":"a","type":"int"},{"name":"a","type":"int"}]}"#,
            r#"{"type":"record","name":"node","fields":[{"name":"next","type":"node"}]}"#,
            r#"{"type":"enum","name":"x","cardinality":0}"#,
            r#"{"type":"enum","name":"x","symbols":["a","a"]}"#,
            r#"{"type":"record","name":"r","fields":[]}"#,
            r#"{"type":"int","name":"a/b"}"#,
            r#"[1,2]"#,
        ];
        for doc in bad {
            assert!(SchemaNode::parse(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn named_types_can_be_reused() {
        let doc = r#"{"type":"record","name":"pair","fields":[
            {"name":"a","type":{"type":"enum","name":"color","symbols":["r","g"]}},
            {"name":"b","type":"color"}]}"#;
        let s = SchemaNode::parse(doc).unwrap();
        let SchemaNode::Struct { fields, .. } = s else { panic!() };
        assert_eq!(fields[1].name(), "b");
        assert!(matches!(&fields[1], SchemaNode::Categorical { cardinality: Some(2), .. }));
    }

    #[test]
    fn serialize_parse_is_a_fixed_point() {
        for doc in [USERS, NETFLIX] {
            let a = SchemaNode::parse(doc).unwrap();
            let b = SchemaNode::parse(&a.to_json_string()).unwrap();
            assert_eq!(a, b);
        }
    }

    fn users_encodings() -> Encodings {
        let mut enc = Encodings::default();
        enc.set_vocab("User/Sex", vec!["F".into(), "M".into()]);
        enc.set_vocab("User/transactions/transaction/Place", vec!["a".into(), "b".into(), "c".into()]);
        let t = QuantileTable::new(vec![0.0, 1.0, 2.0], false).unwrap();
        enc.set_table("User/Age", t.clone());
        enc.set_table("User/transactions/transaction/Price", t);
        enc
    }

    #[test]
    fn compiled_tree_matches_codec_expression() {
        let s = SchemaNode::parse(USERS).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (tree, _) = compile::<f64>(&s, &users_encodings(), &CompileOptions::default(), &mut rng).unwrap();
        assert_eq!(
            tree.describe(),
            "User: C_struct[Age: C_num, Sex: C_cat, transactions: C_list[transaction: C_struct[Place: C_cat, Price: C_num]]]"
        );
    }

    #[test]
    fn unresolved_cardinality_fails_to_compile() {
        let s = SchemaNode::parse(USERS).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = compile::<f64>(&s, &Encodings::default(), &CompileOptions::default(), &mut rng);
        assert!(r.is_err());
    }

    #[test]
    fn categorical_gets_one_matrix() {
        let s = SchemaNode::parse(r#"{"type":"enum","name":"x","cardinality":5}"#).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = CompileOptions {
            trainable_c0: false,
            ..Default::default()
        };
        let (_, store) = compile::<f64>(&s, &Encodings::default(), &opts, &mut rng).unwrap();
        assert_eq!(store.by_path("x/W").unwrap().shape(), &[5, 64]);
        assert_eq!(store.trainable_count(), 5 * 64);
    }

    #[test]
    fn netflix_parameter_count_is_stable() {
        let s = SchemaNode::parse(NETFLIX).unwrap();
        let count = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, store) = compile::<f64>(&s, &Encodings::default(), &CompileOptions::default(), &mut rng).unwrap();
            (store.count(), store.paths().map(str::to_string).collect::<Vec<_>>())
        };
        let (a, pa) = count(1);
        let (b, pb) = count(2);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        // embeddings + three transformer pairs (user, review, movie) + c0
        let d = 64;
        let emb = (94 + 4500 + 7 + 5 + 129) * d;
        let attn = 3 * 2 * 2 * 4 * d * d;
        assert_eq!(a, emb + attn + d);
        assert!(pa.contains(&"user/review/movie/title/W".to_string()));
    }
}
