//! On-disk model format: a directory holding `manifest.json` and one raw
//! little-endian `f64` file per tensor (`<name>.bin`, row-major).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub hyperparameters: Value,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub provenance: Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
}

/// Writes `params` to `dir`, replacing any previous checkpoint there. The
/// directory is assembled under a sibling name and renamed into place.
pub fn save(dir: &Path, kind: &str, hyperparameters: Value, provenance: Value, params: &ParameterSet) -> Result<()> {
    let staging = crate::util::tmp_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let mut entries = Vec::with_capacity(params.len());
    for p in params.iter() {
        let bytes: Vec<u8> = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        write_atomic(&staging.join(format!("{}.bin", p.name)), &bytes)?;
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        hyperparameters,
        tensors: entries,
        provenance,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&staging.join(MANIFEST), &json)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = crate::util::read_to_string(&path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::IncompatibleArtifact {
            path,
            reason: format!("format_version {} (expected {FORMAT_VERSION})", manifest.format_version),
        });
    }
    Ok(manifest)
}

/// Loads a checkpoint, requiring the manifest to declare `kind`.
pub fn load(dir: &Path, kind: &str) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != kind {
        return Err(Error::IncompatibleArtifact {
            path: dir.to_path_buf(),
            reason: format!("model kind {:?}, expected {kind:?}", manifest.kind),
        });
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let path = dir.join(format!("{}.bin", entry.name));
        if !path.exists() {
            return Err(Error::MissingArtifact { path });
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected: usize = entry.shape.iter().product();
        if bytes.len() != expected * 8 {
            return Err(Error::IncompatibleArtifact {
                path,
                reason: format!("{} bytes for shape {:?}", bytes.len(), entry.shape),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)?));
    }
    Ok(Checkpoint { manifest, tensors })
}

impl Checkpoint {
    /// Copies stored values into `params`, which must have exactly the same
    /// names and shapes.
    pub fn restore_into(&self, params: &mut ParameterSet, dir: &Path) -> Result<()> {
        let incompatible = |reason: String| Error::IncompatibleArtifact {
            path: dir.to_path_buf(),
            reason,
        };
        if self.tensors.len() != params.len() {
            return Err(incompatible(format!(
                "{} tensors stored, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (name, tensor) in &self.tensors {
            let id = params
                .find(name)
                .ok_or_else(|| incompatible(format!("unknown tensor {name}")))?;
            if params.value(id).shape() != tensor.shape() {
                return Err(incompatible(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    params.value(id).shape()
                )));
            }
            *params.value_mut(id) = tensor.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Linear;
    use crate::rng::SeedStream;
    use serde_json::json;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model");
        let mut ps = ParameterSet::new();
        let mut rng = SeedStream::new(5).rng();
        Linear::new(&mut ps, "a", 3, 2, &mut rng);
        Linear::new(&mut ps, "b", 2, 1, &mut rng);
        save(&path, "toy", json!({"width": 3}), json!({"seed": 5}), &ps).unwrap();
        save(&path, "toy", json!({"width": 3}), json!({"seed": 5}), &ps).unwrap();

        let ck = load(&path, "toy").unwrap();
        assert_eq!(ck.manifest.hyperparameters["width"], 3);
        assert_eq!(ck.manifest.tensors[0].shape, vec![3, 2]);
        let raw = fs::read(path.join("a.weight.bin")).unwrap();
        assert_eq!(raw.len(), 6 * 8);
        assert_eq!(
            f64::from_le_bytes(raw[..8].try_into().unwrap()),
            ps.iter().next().unwrap().value.data()[0]
        );

        let mut fresh = ParameterSet::new();
        let mut rng = SeedStream::new(99).rng();
        Linear::new(&mut fresh, "a", 3, 2, &mut rng);
        Linear::new(&mut fresh, "b", 2, 1, &mut rng);
        ck.restore_into(&mut fresh, &path).unwrap();
        for (p, q) in ps.iter().zip(fresh.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn rejects_wrong_kind_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        let mut ps = ParameterSet::new();
        let mut rng = SeedStream::new(5).rng();
        Linear::new(&mut ps, "a", 3, 2, &mut rng);
        save(&path, "toy", Value::Null, Value::Null, &ps).unwrap();
        assert!(matches!(load(&path, "other"), Err(Error::IncompatibleArtifact { .. })));
        let mut other = ParameterSet::new();
        Linear::new(&mut other, "a", 2, 2, &mut rng);
        let ck = load(&path, "toy").unwrap();
        assert!(ck.restore_into(&mut other, &path).is_err());
        assert!(matches!(
            load(&dir.path().join("absent"), "toy"),
            Err(Error::MissingArtifact { .. })
        ));
    }
}
