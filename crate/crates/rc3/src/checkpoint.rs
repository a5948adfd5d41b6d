//! Checkpoints: a directory with `manifest.toml` (model configuration, tensor
//! names, shapes and byte offsets) and `params.bin`, the concatenated tensors
//! as little-endian f64.

use std::fs;
use std::path::Path;

use rc3_core::model::{Model, ModelConfig, ParamSet};
use rc3_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Table;

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.toml";
pub const BLOB: &str = "params.bin";
const FORMAT: &str = "rc3-checkpoint";
const VERSION: u32 = 1;
const DIFF_LINES: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    pub blob_bytes: u64,
    pub sha256: String,
    pub model: ModelConfig,
    pub tensor: Vec<TensorEntry>,
}

impl Manifest {
    fn of(model: &Model, blob: &[u8]) -> Self {
        let mut offset = 0u64;
        let tensor = model
            .params()
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            blob: BLOB.into(),
            blob_bytes: blob.len() as u64,
            sha256: hex::encode(Sha256::digest(blob)),
            model: model.config().clone(),
            tensor,
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = toml::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), e.message())))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format {} v{}, expected {FORMAT} v{VERSION}",
                path.display(),
                m.format,
                m.version
            )));
        }
        Ok(m)
    }

    /// Differences against the layout `cfg` produces, as
    /// `(first mismatched tensor, all diff lines)`.
    pub fn diff(&self, cfg: &ModelConfig) -> Option<(String, Vec<String>)> {
        let mut lines = Vec::new();
        let (a, b) = (
            Table::try_from(cfg).expect("model config serializes"),
            Table::try_from(&self.model).expect("model config serializes"),
        );
        for (k, v) in &a {
            if b.get(k) != Some(v) {
                let found = b.get(k).map_or("missing".to_string(), |x| x.to_string());
                lines.push(format!("model.{k}: expected {v}, found {found}"));
            }
        }
        let want = layout(cfg);
        let mut first = None;
        for i in 0..want.len().max(self.tensor.len()) {
            let line = match (want.get(i), self.tensor.get(i)) {
                (Some((n, s)), Some(e)) if *n == e.name && *s == e.shape => continue,
                (Some((n, s)), Some(e)) => format!("tensor #{i}: expected {n} {s:?}, found {} {:?}", e.name, e.shape),
                (Some((n, s)), None) => format!("tensor #{i}: expected {n} {s:?}, missing"),
                (None, Some(e)) => format!("tensor #{i}: unexpected {} {:?}", e.name, e.shape),
                (None, None) => unreachable!(),
            };
            first.get_or_insert_with(|| line.clone());
            lines.push(line);
        }
        if lines.is_empty() {
            return None;
        }
        let first = first.unwrap_or_else(|| lines[0].clone());
        Some((first, lines))
    }
}

/// Names and shapes of the parameters of a model built from `cfg`.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    match Model::new(cfg.clone(), 0) {
        Ok(m) => m.params().iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        Err(_) => Vec::new(),
    }
}

pub fn save(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(8 * model.params().scalar_count());
    for t in model.params().tensors() {
        for x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest::of(model, &blob);
    let bpath = dir.join(BLOB);
    fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
    let mpath = dir.join(MANIFEST);
    let text = toml::to_string(&manifest).expect("manifest serializes");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

/// Loads a checkpoint. With `expected`, the manifest must describe exactly
/// that configuration; the error names the first mismatched tensor and lists
/// every difference. Nothing is returned unless the whole blob validates.
pub fn load(dir: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let m = Manifest::read(dir)?;
    if let Some(cfg) = expected {
        if let Some((first, lines)) = m.diff(cfg) {
            let mut msg = format!("{}: manifest does not match the model config; first mismatch {first}", dir.display());
            for l in lines.iter().take(DIFF_LINES) {
                msg.push_str("\n  ");
                msg.push_str(l);
            }
            if lines.len() > DIFF_LINES {
                msg.push_str(&format!("\n  ... {} more differences", lines.len() - DIFF_LINES));
            }
            return Err(Error::Checkpoint(msg));
        }
    }
    let bpath = dir.join(&m.blob);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if blob.len() as u64 != m.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, manifest declares {}",
            bpath.display(),
            blob.len(),
            m.blob_bytes
        )));
    }
    if hex::encode(Sha256::digest(&blob)) != m.sha256 {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch", bpath.display())));
    }
    let mut params = ParamSet::new();
    let mut end = 0u64;
    for e in &m.tensor {
        let n: usize = e.shape.iter().product();
        let stop = e.offset + 8 * n as u64;
        if e.offset != end || stop > m.blob_bytes {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {} spans bytes {}..{stop} of {}, expected to start at {end}",
                dir.display(),
                e.name,
                e.offset,
                m.blob_bytes
            )));
        }
        let data = blob[e.offset as usize..stop as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.push(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        end = stop;
    }
    if end != m.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes after the last tensor",
            dir.display(),
            m.blob_bytes - end
        )));
    }
    Ok(Model::from_params(m.model, params)?)
}

/// Manifest text followed by a blob status line.
pub fn inspect(dir: &Path) -> Result<String> {
    let m = Manifest::read(dir)?;
    let mut out = toml::to_string(&m).expect("manifest serializes");
    let scalars: usize = m.tensor.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let status = match load(dir, None) {
        Ok(_) => "ok".to_string(),
        Err(e) => e.to_string(),
    };
    out.push_str(&format!("# {} tensors, {scalars} parameters, blob {status}\n", m.tensor.len()));
    Ok(out)
}
