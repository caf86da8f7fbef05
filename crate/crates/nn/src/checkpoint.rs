use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::NnError;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus arbitrary model metadata, stored as JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub format_version: u32,
    pub kind: String,
    pub meta: M,
    pub params: ParamStore,
}

impl<M: Serialize + DeserializeOwned> Checkpoint<M> {
    pub fn new(kind: impl Into<String>, meta: M, params: ParamStore) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            kind: kind.into(),
            meta,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Loads and checks format version and model kind.
    pub fn load(path: &Path, kind: &str) -> Result<Self, NnError> {
        let bytes = fs::read(path)?;
        let ck: Self = serde_json::from_slice(&bytes)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(NnError::Version {
                found: ck.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if ck.kind != kind {
            return Err(NnError::Kind {
                found: ck.kind,
                expected: kind.to_string(),
            });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn roundtrip_and_kind_check() {
        let dir = std::env::temp_dir().join(format!("sfn-ck-{}", std::process::id()));
        let path = dir.join("m.json");
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(&[2], vec![1.5, -0.25]));
        Checkpoint::new("toy", 7u32, store.clone())
            .save(&path)
            .unwrap();
        let back = Checkpoint::<u32>::load(&path, "toy").unwrap();
        assert_eq!(back.params, store);
        assert_eq!(back.meta, 7);
        assert!(matches!(
            Checkpoint::<u32>::load(&path, "other"),
            Err(NnError::Kind { .. })
        ));
        fs::remove_dir_all(dir).ok();
    }
}
