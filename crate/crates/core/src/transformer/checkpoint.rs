use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::polyfit::CompositePolynomial;
use crate::tensor::{PolyMode, Tensor};

const MAGIC: &[u8; 8] = b"PFPARAMS";
const FORMAT: &str = "polyformer-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    seed: u64,
    stages: Vec<String>,
    poly_mode: PolyMode,
    poly_sites: BTreeMap<String, CompositePolynomial>,
    params: Vec<ParamMeta>,
    param_file: String,
    total_values: u64,
}

fn bin_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (JSON manifest) and `<path>.bin` beside it (parameters
/// in declaration order as little-endian doubles after a magic tag and a
/// u64 count).
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bin = bin_path(path);
    let params: Vec<ParamMeta> = model
        .params()
        .iter()
        .map(|p| ParamMeta {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        })
        .collect();
    let total: usize = model.params().iter().map(|p| p.value.len()).sum();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        config: model.config().clone(),
        seed: model.config().seed,
        stages: model.stages().to_vec(),
        poly_mode: model.poly_mode(),
        poly_sites: model.poly_sites().iter().map(|(k, v)| (k.clone(), (**v).clone())).collect(),
        params,
        param_file: bin
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        total_values: total as u64,
    };
    let mut bytes = Vec::with_capacity(16 + 8 * total);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(total as u64).to_le_bytes());
    for p in model.params() {
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&bin, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let bin = path.with_file_name(&manifest.param_file);
    let bytes = fs::read(bin)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad parameter file header".into()));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if count != manifest.total_values || bytes.len() as u64 != 16 + 8 * count {
        return Err(Error::Checkpoint(format!(
            "parameter file holds {} bytes, header declares {count} values, manifest {}",
            bytes.len(),
            manifest.total_values
        )));
    }
    let mut model = Model::new(manifest.config)?;
    let names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
    let expected: Vec<&str> = manifest.params.iter().map(|p| p.name.as_str()).collect();
    if names != expected {
        return Err(Error::Checkpoint("parameter layout does not match configuration".into()));
    }
    let mut values = Vec::with_capacity(manifest.params.len());
    let mut at = 16;
    for meta in &manifest.params {
        let n: usize = meta.shape.iter().product();
        let data = bytes[at..at + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        at += 8 * n;
        values.push(Tensor::new(meta.shape.clone(), data)?);
    }
    model.set_param_values(values)?;
    model.set_stages(manifest.stages);
    model.set_poly_mode(manifest.poly_mode);
    for (site, p) in manifest.poly_sites {
        model.set_poly_site(&site, p);
    }
    Ok(model)
}
