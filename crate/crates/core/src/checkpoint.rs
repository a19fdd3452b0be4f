//! Parameter archives: safetensors files carrying one metadata entry.
//!
//! Metadata is stored as a single JSON object under one key, written from an
//! ordered map, so saving the same parameters and metadata always produces
//! the same bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const META_KEY: &str = "flowfix";

/// Raw archive contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn from_params(params: &ParamStore<f32>, metadata: BTreeMap<String, String>) -> Self {
        let tensors = params
            .ids()
            .map(|id| {
                (
                    params.name(id).to_string(),
                    (params.shape(id).to_vec(), params.get(id).to_vec()),
                )
            })
            .collect();
        Archive { tensors, metadata }
    }

    /// Copies stored values into `params`; the sets of names and shapes must
    /// match exactly.
    pub fn fill(&self, params: &mut ParamStore<f32>) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "archive holds {} tensors, model expects {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_string();
            let (shape, values) = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("archive is missing {name}")))?;
            if shape.as_slice() != params.shape(id) {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {shape:?}, model expects {:?}",
                    params.shape(id)
                )));
            }
            params.get_mut(id).copy_from_slice(values);
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("archive metadata lacks {key:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(name, (_, values))| {
                (
                    name.clone(),
                    values.iter().flat_map(|v| v.to_le_bytes()).collect(),
                )
            })
            .collect();
        let views = bytes
            .iter()
            .zip(self.tensors.values())
            .map(|((name, data), (shape, _))| {
                TensorView::new(Dtype::F32, shape.clone(), data)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta_json =
            serde_json::to_string(&self.metadata).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let info = HashMap::from([(META_KEY.to_string(), meta_json)]);
        safetensors::tensor::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let err = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let st = SafeTensors::deserialize(buf).map_err(err)?;
        let (_, header) = SafeTensors::read_metadata(buf).map_err(err)?;
        let metadata = match header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
            Some(json) => serde_json::from_str(json)
                .map_err(|e| Error::Checkpoint(format!("bad archive metadata: {e}")))?,
            None => BTreeMap::new(),
        };
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!(
                    "{name}: unsupported dtype {:?}",
                    view.dtype()
                )));
            }
            let values = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, (view.shape().to_vec(), values));
        }
        Ok(Archive { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
