//! Versioned, self-describing checkpoints.
//!
//! A checkpoint is a safetensors file. Its header metadata carries a single
//! `scribe` key whose value is a JSON object with the format tag, the
//! checkpoint kind and arbitrary typed fields (dimensions, schedule, codec
//! tag, config echo, ...). Keeping one key makes the header byte-stable.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "scribe";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub fields: BTreeMap<String, Value>,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            fields: BTreeMap::new(),
            tensors: HashMap::new(),
        }
    }

    pub fn format_tag(kind: &str) -> String {
        format!("scribe/{kind}/v{FORMAT_VERSION}")
    }

    pub fn set<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let v = serde_json::to_value(value)
            .map_err(|e| Error::Checkpoint(format!("field {key}: {e}")))?;
        self.fields.insert(key.to_string(), v);
        Ok(())
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .fields
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("{} checkpoint lacks field {key}", self.kind)))?;
        serde_json::from_value(v.clone())
            .map_err(|e| Error::Checkpoint(format!("field {key}: {e}")))
    }

    pub fn insert_tensors(&mut self, tensors: BTreeMap<String, Tensor>) {
        self.tensors.extend(tensors);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        header.insert("format".into(), Value::String(Self::format_tag(&self.kind)));
        header.insert("kind".into(), Value::String(self.kind.clone()));
        header.insert(
            "fields".into(),
            Value::Object(self.fields.clone().into_iter().collect()),
        );
        let meta = HashMap::from([(
            META_KEY.to_string(),
            serde_json::to_string(&Value::Object(header))
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
        )]);
        let mut named: Vec<(&String, &Tensor)> = self.tensors.iter().collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        safetensors::serialize(named, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    /// Decodes a checkpoint, requiring kind `expected_kind` when given.
    pub fn from_bytes(bytes: &[u8], expected_kind: Option<&str>) -> Result<Self> {
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(format!("not a checkpoint file: {e}")))?;
        let raw = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing checkpoint header".into()))?;
        let header: Value = serde_json::from_str(raw)
            .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint header: {e}")))?;
        let kind = header
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Checkpoint("checkpoint header lacks kind".into()))?
            .to_string();
        let format = header.get("format").and_then(Value::as_str).unwrap_or("");
        if format != Self::format_tag(&kind) {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {format:?}, this build reads {:?}",
                Self::format_tag(&kind)
            )));
        }
        if let Some(want) = expected_kind {
            if kind != want {
                return Err(Error::Checkpoint(format!(
                    "expected a {want} checkpoint, found {kind}"
                )));
            }
        }
        let fields = match header.get("fields") {
            Some(Value::Object(m)) => m.clone().into_iter().collect(),
            _ => return Err(Error::Checkpoint("checkpoint header lacks fields".into())),
        };
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("tensor payload: {e}")))?;
        Ok(Self {
            kind,
            fields,
            tensors,
        })
    }

    pub fn load(path: impl AsRef<Path>, expected_kind: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_kind)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("unit");
        c.set("d", &256usize).unwrap();
        c.set("names", &vec!["a", "b"]).unwrap();
        c.tensors.insert(
            "w".into(),
            Tensor::new(&[1.0f32, 2.0, 3.0], &Device::Cpu).unwrap(),
        );
        c.tensors.insert(
            "b".into(),
            Tensor::new(&[4.0f32], &Device::Cpu).unwrap(),
        );
        c
    }

    #[test]
    fn round_trip_and_byte_stability() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(bytes, sample().to_bytes().unwrap());
        let back = Checkpoint::from_bytes(&bytes, Some("unit")).unwrap();
        assert_eq!(back.get::<usize>("d").unwrap(), 256);
        let w: Vec<f32> = back.tensor("w").unwrap().to_vec1().unwrap();
        assert_eq!(w, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn rejects_wrong_kind_and_garbage() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Some("other")),
            Err(Error::Checkpoint(_))
        ));
        assert!(Checkpoint::from_bytes(b"not a checkpoint", None).is_err());
        assert!(Checkpoint::from_bytes(&[], None).is_err());
    }

    #[test]
    fn rejects_other_format_versions() {
        let c = sample();
        let meta = HashMap::from([(
            META_KEY.to_string(),
            r#"{"format":"scribe/unit/v99","kind":"unit","fields":{}}"#.to_string(),
        )]);
        let bytes = safetensors::serialize(
            c.tensors.iter().collect::<Vec<_>>(),
            Some(meta),
        )
        .unwrap();
        let err = Checkpoint::from_bytes(&bytes, None).unwrap_err();
        assert!(err.to_string().contains("v99"), "{err}");
    }
}
