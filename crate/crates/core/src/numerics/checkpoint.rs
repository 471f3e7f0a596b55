use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Scalar, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Self-describing parameter container: names to shape + row-major values,
/// plus the config that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub params: BTreeMap<String, StoredTensor>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: kind.to_string(),
            config,
            params: BTreeMap::new(),
            extra: serde_json::Value::Null,
        }
    }

    /// Adds every parameter of `store`, prefixing names with `prefix`.
    pub fn add_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.named_tensors() {
            self.params.insert(
                format!("{prefix}{name}"),
                StoredTensor {
                    shape: t.shape().to_vec(),
                    values: t.to_f64_vec(),
                },
            );
        }
    }

    /// Overwrites every parameter of `store` from entries named `prefix + name`.
    pub fn load_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<(), NumericsError> {
        let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
        for name in names {
            let key = format!("{prefix}{name}");
            let stored = self
                .params
                .get(&key)
                .ok_or_else(|| NumericsError::Checkpoint(format!("missing parameter {key}")))?;
            let t = Tensor::new(
                stored.shape.clone(),
                stored.values.iter().map(|&v| T::of(v)).collect(),
            )?;
            let id = store.id(&name)?;
            store
                .set(id, t)
                .map_err(|e| NumericsError::Checkpoint(format!("{key}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, NumericsError> {
        serde_json::to_string(self).map_err(|e| NumericsError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, NumericsError> {
        let c: Self = serde_json::from_str(s).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(NumericsError::Checkpoint(format!(
                "unsupported format version {}",
                c.format_version
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        std::fs::write(path, self.to_json()?).map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeedStream;

    #[test]
    fn store_round_trips_bit_exactly() {
        let mut a = ParamStore::<f64>::new();
        a.insert_uniform("w", &[3, 2], 3, "g", &SeedStream::new(9)).unwrap();
        let mut ck = Checkpoint::new("test", serde_json::json!({"width": 3}));
        ck.add_store("m.", &a);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let mut b = ParamStore::<f64>::new();
        b.insert("w", Tensor::zeros(&[3, 2]), "g").unwrap();
        back.load_store("m.", &mut b).unwrap();
        assert_eq!(a.entries()[0].value, b.entries()[0].value);
    }

    #[test]
    fn version_field_is_enforced() {
        let mut ck = Checkpoint::new("x", serde_json::Value::Null);
        ck.format_version = 99;
        let s = serde_json::to_string(&ck).unwrap();
        assert!(Checkpoint::from_json(&s).is_err());
        assert!(Checkpoint::from_json(r#"{"kind":"x","config":null,"params":{}}"#).is_err());
    }
}
