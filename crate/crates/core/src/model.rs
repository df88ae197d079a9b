//! The self-describing model bundle: schema, encodings, compile options,
//! parameters and the run manifest in one versioned JSON document.
//!
//! Parameters are stored as base64 of little-endian `f64` bytes so a save
//! and load round-trips bitwise.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::codec::CodecTree;
use crate::data::Encodings;
use crate::error::{Error, Result};
use crate::rng::{derive, streams};
use crate::schema::{compile, CompileOptions, SchemaNode};
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT: &str = "nestgen-model";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamRecord {
    path: String,
    shape: Vec<usize>,
    trainable: bool,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    schema: Json,
    encodings: Encodings,
    options: CompileOptions,
    params: Vec<ParamRecord>,
    manifest: Json,
}

/// A trained model ready for sampling.
#[derive(Clone, Debug)]
pub struct Model {
    pub schema: SchemaNode,
    pub encodings: Encodings,
    pub options: CompileOptions,
    pub params: ParamStore<f64>,
    /// Free-form provenance record of the run that produced the model.
    pub manifest: Json,
}

fn encode_f64(xs: &[f64]) -> String {
    let bytes: Vec<u8> = xs.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode_f64(s: &str, path: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Model(format!("{path}: bad parameter encoding: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Model(format!("{path}: truncated parameter data")));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl Model {
    /// Compiles a fresh, untrained model.
    pub fn init(schema: SchemaNode, encodings: Encodings, options: CompileOptions, seed: u64) -> Result<(Self, CodecTree<f64>)> {
        let (tree, params) = compile::<f64>(&schema, &encodings, &options, &mut derive(seed, streams::INIT))?;
        let model = Self {
            schema,
            encodings,
            options,
            params,
            manifest: Json::Null,
        };
        Ok((model, tree))
    }

    /// Rebuilds the codec tree; its parameter ids index `self.params`.
    pub fn tree(&self) -> Result<CodecTree<f64>> {
        let (tree, fresh) = compile::<f64>(&self.schema, &self.encodings, &self.options, &mut derive(0, streams::INIT))?;
        let expected: Vec<(&str, &[usize])> = fresh.ids().map(|id| (fresh.path(id), fresh.get(id).shape())).collect();
        let actual: Vec<(&str, &[usize])> = self
            .params
            .ids()
            .map(|id| (self.params.path(id), self.params.get(id).shape()))
            .collect();
        if expected != actual {
            let first = expected
                .iter()
                .zip(&actual)
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.0.to_string())
                .unwrap_or_else(|| "parameter count".into());
            return Err(Error::Model(format!("parameters do not match the schema at {first}")));
        }
        Ok(tree)
    }

    pub fn to_json(&self) -> Result<String> {
        let params = self
            .params
            .ids()
            .map(|id| ParamRecord {
                path: self.params.path(id).to_string(),
                shape: self.params.get(id).shape().to_vec(),
                trainable: self.params.is_trainable(id),
                data: encode_f64(self.params.get(id).data()),
            })
            .collect();
        let doc = Document {
            format: FORMAT.into(),
            version: VERSION,
            schema: self.schema.to_json(),
            encodings: self.encodings.clone(),
            options: self.options.clone(),
            params,
            manifest: self.manifest.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text).map_err(|e| Error::Model(format!("not a model file: {e}")))?;
        if doc.format != FORMAT {
            return Err(Error::Model(format!("unknown format {:?}", doc.format)));
        }
        if doc.version != VERSION {
            return Err(Error::Model(format!("unsupported model version {}", doc.version)));
        }
        let schema = SchemaNode::from_json(&doc.schema)?;
        let mut params = ParamStore::new();
        for p in doc.params {
            let data = decode_f64(&p.data, &p.path)?;
            let t = Tensor::new(p.shape, data).map_err(|e| Error::Model(format!("{}: {e}", p.path)))?;
            params.insert_with(p.path, t, p.trainable)?;
        }
        let model = Self {
            schema,
            encodings: doc.encodings,
            options: doc.options,
            params,
            manifest: doc.manifest,
        };
        model.tree()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Model(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::QuantileTable;
    use crate::tensor::TransformerConfig;

    fn model() -> Model {
        let schema = SchemaNode::parse(
            r#"{"type":"record","name":"r","fields":[{"name":"a","type":"enum"},{"name":"x","type":"float"}]}"#,
        )
        .unwrap();
        let mut enc = Encodings::default();
        enc.set_vocab("r/a", vec!["p".into(), "q".into()]);
        enc.set_table("r/x", QuantileTable::new(vec![0.1, 0.7, 3.0], false).unwrap());
        let opts = CompileOptions {
            transformer: TransformerConfig {
                width: 8,
                blocks: 1,
                heads: 2,
                init_std: 0.3,
            },
            ..Default::default()
        };
        let (mut m, _) = Model::init(schema, enc, opts, 5).unwrap();
        m.manifest = serde_json::json!({"seed": 5});
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let text = m.to_json().unwrap();
        let back = Model::from_json(&text).unwrap();
        assert_eq!(back.schema, m.schema);
        assert_eq!(back.encodings, m.encodings);
        assert_eq!(back.manifest, m.manifest);
        for id in m.params.ids() {
            let (a, b) = (m.params.get(id), back.params.get(id));
            assert_eq!(m.params.path(id), back.params.path(id));
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn odd_floats_survive() {
        let mut m = model();
        let id = m.params.ids().next().unwrap();
        m.params.get_mut(id).data_mut()[0] = -0.0;
        m.params.get_mut(id).data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let back = Model::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.params.get(id).data()[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.params.get(id).data()[1], f64::MIN_POSITIVE / 3.0);
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let m = model();
        let text = m.to_json().unwrap().replace("\"r/a/W\"", "\"r/zz/W\"");
        assert!(Model::from_json(&text).is_err());
        assert!(Model::from_json("{}").is_err());
        let text = m.to_json().unwrap().replace("\"version\": 1", "\"version\": 99");
        assert!(Model::from_json(&text).is_err());
    }
}
