//! Model checkpointing.
//!
//! File layout: the magic bytes `SQM1`, a 4-byte little-endian manifest
//! length, the JSON manifest (parameter names, shapes, trainability, model
//! config, step, dev metric), then each parameter's values as little-endian
//! 32-bit floats, concatenated in manifest order. Loading validates the
//! manifest against the expected parameter schema and restores parameters
//! bit-exactly.

use crate::error::{Error, Result};
use crate::model::{parameter_schema, Model, ModelConfig, Param, ParamStore};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SQM1";

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    step: u64,
    dev_metric: Option<f64>,
    params: Vec<ManifestParam>,
}

/// A model snapshot with its training position and selection metric.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub dev_metric: Option<f64>,
}

pub fn save_checkpoint(
    model: &Model,
    step: u64,
    dev_metric: Option<f64>,
    path: &Path,
) -> Result<()> {
    let manifest = Manifest {
        config: model.config.clone(),
        step,
        dev_metric,
        params: model
            .params()
            .iter()
            .map(|p| ManifestParam {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&manifest_bytes)?;
    for param in model.params().iter() {
        for &value in param.value.data() {
            out.write_all(&value.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);

    let mut magic = [0u8; 4];
    read_fully(&mut file, &mut magic, "header")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic bytes {magic:?}",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    read_fully(&mut file, &mut len_bytes, "manifest length")?;
    let manifest_len = u32::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    read_fully(&mut file, &mut manifest_bytes, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;

    validate_manifest(&manifest)?;

    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let count: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; count * 4];
        read_fully(
            &mut file,
            &mut bytes,
            &format!("payload of '{}'", entry.name),
        )?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let value = Tensor::new(entry.shape.clone(), data)?;
        store.insert(Param::new(&entry.name, value, entry.trainable));
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: trailing bytes after the last parameter payload",
            path.display()
        )));
    }

    Ok(Checkpoint {
        model: Model::from_parts(manifest.config, store),
        step: manifest.step,
        dev_metric: manifest.dev_metric,
    })
}

fn read_fully(reader: &mut impl Read, buffer: &mut [u8], what: &str) -> Result<()> {
    reader
        .read_exact(buffer)
        .map_err(|_| Error::Checkpoint(format!("truncated file while reading {what}")))
}

/// The manifest must list exactly the parameters the config implies, in
/// order, with matching shapes. The vocabulary size is taken from the
/// embedding entry, which therefore must come first.
fn validate_manifest(manifest: &Manifest) -> Result<()> {
    manifest.config.validate()?;
    let vocab_size = match manifest.params.first() {
        Some(entry) if entry.name == "embedding.table" && entry.shape.len() == 2 => entry.shape[0],
        _ => {
            return Err(Error::Checkpoint(
                "manifest must start with the embedding.table parameter".to_string(),
            ))
        }
    };
    let expected = parameter_schema(&manifest.config, vocab_size);
    if manifest.params.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, config implies {}",
            manifest.params.len(),
            expected.len()
        )));
    }
    for (entry, (name, shape)) in manifest.params.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::ParamMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{pad_batch, PreparedDialogue};
    use crate::embedding::EmbeddingTable;
    use crate::model::ModeFlags;

    fn tiny_model() -> Model {
        let config = ModelConfig {
            general_dim: 2,
            task_dim: 2,
            hidden_dim: 2,
            ahre_layers: 2,
            mlp_hidden: 3,
            modes: ModeFlags::default(),
        };
        let mut matrix = Tensor::zeros(vec![7, 4]);
        for (i, v) in matrix.data_mut().iter_mut().enumerate() {
            if i >= 4 {
                *v = ((i % 13) as f32 - 6.0) / 11.0;
            }
        }
        let table = EmbeddingTable::from_matrix(matrix, 2, 2, false).unwrap();
        Model::init(&config, &table, 29).unwrap()
    }

    fn probe_batch() -> crate::data::PaddedBatch {
        pad_batch(&[PreparedDialogue {
            example_id: "p".to_string(),
            context: vec![3, 4, 2, 5],
            last_span: (2, 4),
            candidates: vec![vec![6, 3], vec![4]],
            label: Some(0),
        }])
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model();
        save_checkpoint(&model, 42, Some(0.75), &path).unwrap();
        let restored = load_checkpoint(&path).unwrap();

        assert_eq!(restored.step, 42);
        assert_eq!(restored.dev_metric, Some(0.75));
        assert_eq!(restored.model.config, model.config);
        for (a, b) in model.params().iter().zip(restored.model.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.value.data(), b.value.data(), "payload of {}", a.name);
        }
        // identical parameters must produce identical scores
        let batch = probe_batch();
        assert_eq!(
            model.score_batch(&batch).unwrap(),
            restored.model.score_batch(&batch).unwrap()
        );
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, b"NOPE rest of file").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn truncated_payload_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&tiny_model(), 0, None, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(err.to_string().contains("mod.w"), "{err}");
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&tiny_model(), 0, None, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn wrong_shape_in_manifest_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = tiny_model();
        let param = model.params_mut().get_mut("pool.w1").unwrap();
        param.value = Tensor::zeros(vec![1, 1]);
        save_checkpoint(&model, 0, None, &path).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        match err {
            Error::ParamMismatch {
                name,
                expected,
                found,
            } => {
                assert_eq!(name, "pool.w1");
                assert_eq!(expected, vec![4, 4]);
                assert_eq!(found, vec![1, 1]);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn garbled_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&tiny_model(), 0, None, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[10] = b'!';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
