//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<domain>/inputs.f32   little-endian, [n, c, h, w] row-major
//! <root>/<domain>/labels.u8    one byte per sample
//! <root>/<domain>/depth.f32    little-endian, [n, h_d, w_d] row-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DomainDataset, DomainSpec, Sample};
use crate::error::{Error, Result};
use crate::tensor::NdArray;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    domains: Vec<ManifestDomain>,
}

#[derive(Serialize, Deserialize)]
struct ManifestDomain {
    name: String,
    n_samples: usize,
    input_shape: [usize; 3],
    depth_shape: [usize; 2],
    seed: u64,
    /// Generation parameters; absent for datasets produced elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<DomainSpec>,
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

struct Blobs {
    inputs: Vec<u8>,
    labels: Vec<u8>,
    depth: Vec<u8>,
}

fn blobs(d: &DomainDataset) -> Blobs {
    Blobs {
        inputs: f32_bytes(d.samples.iter().flat_map(|s| s.x.data().iter().copied())),
        labels: d.samples.iter().map(|s| s.y).collect(),
        depth: f32_bytes(d.samples.iter().flat_map(|s| s.depth.data().iter().copied())),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `datasets` under `root`, creating directories as needed.
pub fn save_dataset(datasets: &[DomainDataset], root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut domains = Vec::with_capacity(datasets.len());
    for d in datasets {
        let dir = root.join(d.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let b = blobs(d);
        write(&dir.join("inputs.f32"), &b.inputs)?;
        write(&dir.join("labels.u8"), &b.labels)?;
        write(&dir.join("depth.f32"), &b.depth)?;
        domains.push(ManifestDomain {
            name: d.name().to_string(),
            n_samples: d.samples.len(),
            input_shape: d.image_shape,
            depth_shape: d.depth_shape,
            seed: d.spec.seed,
            spec: Some(d.spec.clone()),
        });
    }
    let manifest = Manifest { version: MANIFEST_VERSION, domains };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    write(&path, text.as_bytes())
}

fn read_blob(path: PathBuf, expected: usize, what: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("{what}: expected {expected} bytes from manifest, found {}", bytes.len()),
        ));
    }
    Ok(bytes)
}

fn f32_values(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect()
}

/// Reads a dataset written by [`save_dataset`], cross-checking every blob
/// length against the manifest.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<DomainDataset>> {
    let root = root.as_ref();
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported manifest version {} (expected {MANIFEST_VERSION})", manifest.version),
        ));
    }
    let mut out = Vec::with_capacity(manifest.domains.len());
    for m in manifest.domains {
        let dir = root.join(&m.name);
        let img: usize = m.input_shape.iter().product();
        let dep: usize = m.depth_shape.iter().product();
        let inputs = f32_values(&read_blob(dir.join("inputs.f32"), m.n_samples * img * 4, "inputs")?);
        let labels = read_blob(dir.join("labels.u8"), m.n_samples, "labels")?;
        let depth = f32_values(&read_blob(dir.join("depth.f32"), m.n_samples * dep * 4, "depth")?);
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::format(dir.join("labels.u8"), format!("label {bad} is not 0 or 1")));
        }
        let samples = (0..m.n_samples)
            .map(|i| {
                Ok(Sample {
                    x: NdArray::new(m.input_shape.to_vec(), inputs[i * img..(i + 1) * img].to_vec())?,
                    y: labels[i],
                    depth: NdArray::new(m.depth_shape.to_vec(), depth[i * dep..(i + 1) * dep].to_vec())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = m.spec.unwrap_or_else(|| DomainSpec {
            name: m.name.clone(),
            shift: super::DomainShift::identity(0),
            n_real: labels.iter().filter(|&&l| l == 1).count(),
            n_fake: labels.iter().filter(|&&l| l == 0).count(),
            seed: m.seed,
        });
        if spec.name != m.name {
            return Err(Error::format(&path, format!("domain `{}` carries spec named `{}`", m.name, spec.name)));
        }
        out.push(DomainDataset { spec, image_shape: m.input_shape, depth_shape: m.depth_shape, samples });
    }
    Ok(out)
}

/// SHA-256 over the serialized blobs of every domain, in order.
pub fn dataset_digest(datasets: &[DomainDataset]) -> String {
    let mut h = Sha256::new();
    for d in datasets {
        h.update(d.name().as_bytes());
        let b = blobs(d);
        h.update(&b.inputs);
        h.update(&b.labels);
        h.update(&b.depth);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
