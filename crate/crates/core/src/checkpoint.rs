//! Named-tensor archive: `u64` little-endian header length, a JSON header,
//! then every tensor's entries as little-endian `f64` in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{EmbeddingBuffer, NodeState};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::training::{Model, ModelConfig};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema: u32,
    meta: Value,
    tensors: Vec<Entry>,
}

/// Ordered tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            if let Some(bad) = t.iter().find(|v| !v.is_finite()) {
                return Err(Error::Data(format!("tensor {name} holds non-finite value {bad}")));
            }
            entries.push(Entry {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
                offset: payload.len(),
            });
            for v in t.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            schema: SCHEMA,
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Data(format!("corrupt archive: {m}"));
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| corrupt("truncated length"))?.try_into().expect("8 bytes");
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let header_bytes = bytes.get(8..8 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(header_bytes)?;
        if header.schema != SCHEMA {
            return Err(Error::Data(format!(
                "archive schema {} is not supported (expected {SCHEMA})",
                header.schema
            )));
        }
        let payload = &bytes[8 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let [r, c] = e.shape;
            let end = e.offset + 8 * r * c;
            let raw = payload
                .get(e.offset..end)
                .ok_or_else(|| corrupt(&format!("tensor {} overruns payload", e.name)))?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            let t = Array2::from_shape_vec((r, c), vals).map_err(|_| corrupt("bad shape"))?;
            tensors.push((e.name, t));
        }
        Ok(Archive {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    input_dim: usize,
    buffer_capacity: usize,
    buffer_ordinals: Vec<usize>,
    state_layers: usize,
}

/// Everything needed to score or explain after training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub state: NodeState,
    pub buffer: EmbeddingBuffer,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .store
            .iter()
            .map(|(_, name, t)| (format!("param.{name}"), t.clone()))
            .collect();
        for (l, t) in self.state.layers.iter().enumerate() {
            tensors.push((format!("state.layer{l}"), t.clone()));
        }
        for (k, (_, h)) in self.buffer.entries().enumerate() {
            tensors.push((format!("buffer.{k}"), h.clone()));
        }
        let meta = CheckpointMeta {
            model: self.model.config.clone(),
            input_dim: self.model.input_dim,
            buffer_capacity: self.buffer.capacity(),
            buffer_ordinals: self.buffer.ordinals(),
            state_layers: self.state.layers.len(),
        };
        Ok(Archive {
            meta: serde_json::to_value(meta)?,
            tensors,
        })
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone())?;
        let mut store = ParamStore::new();
        for (name, t) in &archive.tensors {
            if let Some(p) = name.strip_prefix("param.") {
                store.add(p, t.clone());
            }
        }
        let model = Model::from_store(meta.input_dim, &meta.model, store)?;
        let missing = |n: &str| Error::Data(format!("checkpoint lacks tensor {n}"));
        let layers = (0..meta.state_layers)
            .map(|l| {
                let n = format!("state.layer{l}");
                archive.get(&n).cloned().ok_or_else(|| missing(&n))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut buffer = EmbeddingBuffer::new(meta.buffer_capacity)?;
        for (k, &ord) in meta.buffer_ordinals.iter().enumerate() {
            let n = format!("buffer.{k}");
            buffer.push(ord, archive.get(&n).cloned().ok_or_else(|| missing(&n))?)?;
        }
        Ok(Checkpoint {
            model,
            state: NodeState { layers },
            buffer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;

    use super::*;
    use crate::backbone::BackboneConfig;

    #[test]
    fn archive_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Archive {
            meta: json!({"note": "x"}),
            tensors: vec![
                ("a".into(), Array2::from_shape_fn((3, 2), |_| rng.gen::<f64>() - 0.5)),
                ("empty".into(), Array2::zeros((0, 4))),
                ("tiny".into(), Array2::from_elem((1, 1), f64::MIN_POSITIVE)),
            ],
        };
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn layout_is_length_header_payload() {
        let a = Archive {
            meta: Value::Null,
            tensors: vec![("w".into(), Array2::from_elem((1, 2), 1.5))],
        };
        let bytes = a.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["schema"], json!(SCHEMA));
        assert_eq!(header["tensors"][0]["shape"], json!([1, 2]));
        assert_eq!(&bytes[8 + hlen..8 + hlen + 8], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 8 + hlen + 16);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Archive::from_bytes(&[1, 2, 3]).is_err());
        let a = Archive {
            meta: Value::Null,
            tensors: vec![("w".into(), Array2::from_elem((2, 2), 1.0))],
        };
        let mut bytes = a.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(Archive::from_bytes(&bytes), Err(Error::Data(_))));
        let nan = Archive {
            meta: Value::Null,
            tensors: vec![("w".into(), Array2::from_elem((1, 1), f64::NAN))],
        };
        assert!(nan.to_bytes().is_err());
        let mut future = a.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(future[..8].try_into().unwrap()) as usize;
        let text = String::from_utf8(future[8..8 + hlen].to_vec()).unwrap();
        let patched = text.replace("\"schema\":1", "\"schema\":9");
        future.splice(8..8 + hlen, patched.into_bytes());
        assert!(Archive::from_bytes(&future).is_err());
    }

    #[test]
    fn checkpoint_restores_model_state_and_buffer() {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                hidden_dim: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = Model::new(3, &cfg, 1).unwrap();
        let mut buffer = EmbeddingBuffer::new(3).unwrap();
        buffer.push(5, Array2::from_elem((2, 4), 0.25)).unwrap();
        buffer.push(6, Array2::from_elem((2, 4), -1.0)).unwrap();
        let state = NodeState::zeros(2, 2, 4);
        let ck = Checkpoint { model, state, buffer };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        for id in ck.model.store.ids() {
            assert_eq!(ck.model.store.get(id), back.model.store.get(id));
            assert_eq!(ck.model.store.name(id), back.model.store.name(id));
        }
        assert_eq!(back.buffer.ordinals(), vec![5, 6]);
        assert_eq!(back.buffer.capacity(), 3);
        assert_eq!(back.state.layers, ck.state.layers);
        assert_eq!(back.model.config, ck.model.config);
        assert!(matches!(Checkpoint::load(dir.path().join("absent")), Err(Error::Io { .. })));
    }
}
