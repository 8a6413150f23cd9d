//! Model checkpoints: a JSON manifest followed by raw parameter buffers.
//!
//! ```text
//! manifest length u32 LE · manifest (UTF-8 JSON) · f64 LE buffers in manifest order
//! ```

use std::fs;
use std::path::Path;

use odeformer_core::model::{layout, ModelConfig, OdeFormer, ParamSet};
use odeformer_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

pub fn to_bytes(model: &OdeFormer) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_config: model.config().clone(),
        params: model
            .params()
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::malformed("checkpoint manifest", e))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::malformed("checkpoint manifest", "too large"))?;
    let mut out = Vec::with_capacity(4 + json.len() + 8 * model.params().numel());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params().tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<OdeFormer> {
    let truncated = |needed: usize| Error::Truncated {
        offset: bytes.len(),
        needed,
    };
    if bytes.len() < 4 {
        return Err(truncated(4 - bytes.len()));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let blob_start = 4 + len;
    if bytes.len() < blob_start {
        return Err(truncated(blob_start - bytes.len()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[4..blob_start]).map_err(|e| Error::malformed("checkpoint manifest", e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            found: manifest.format_version,
        });
    }
    let cfg = manifest.model_config;
    cfg.validate()?;
    let expected = layout(&cfg);
    let matches = expected.len() == manifest.params.len()
        && expected
            .iter()
            .zip(&manifest.params)
            .all(|(s, p)| s.name == p.name && s.shape == p.shape);
    if !matches {
        return Err(Error::malformed(
            "checkpoint",
            "parameter manifest does not match the model configuration",
        ));
    }
    let total: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let blob = &bytes[blob_start..];
    if blob.len() < total * 8 {
        return Err(truncated(total * 8 - blob.len()));
    }
    if blob.len() > total * 8 {
        return Err(Error::malformed("checkpoint", format!("{} trailing bytes", blob.len() - total * 8)));
    }
    let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let tensors = manifest
        .params
        .iter()
        .map(|p| {
            let n = p.shape.iter().product();
            Tensor::new(p.shape.clone(), values.by_ref().take(n).collect())
        })
        .collect::<odeformer_core::Result<Vec<_>>>()?;
    let params = ParamSet::from_tensors(&cfg, tensors)?;
    Ok(OdeFormer::new(cfg, params)?)
}

pub fn save(model: &OdeFormer, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model)?)
}

pub fn load(path: &Path) -> Result<OdeFormer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and checks that it serves channels of shape `dims`.
pub fn load_for(path: &Path, dims: (usize, usize)) -> Result<OdeFormer> {
    let m = load(path)?;
    let found = (m.config().n_ant, m.config().n_sc);
    if found != dims {
        return Err(Error::DimensionMismatch { expected: dims, found });
    }
    Ok(m)
}
