//! Named parameter storage and the on-disk checkpoint format.
//!
//! Parameters live outside any tape as plain tensors keyed by a
//! `section/name` path. Each training step binds them onto a fresh tape
//! as leaves, and the optimizer reads the leaf gradients back.
//!
//! Checkpoints are a flat archive: a version tag (`cogrind-ckpt-v1`)
//! followed by `path -> (shape, little-endian f64 data)` entries in
//! insertion order, so save/load round-trips are byte-stable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, Tensor, TensorError};

/// Version tag written at the head of every checkpoint.
pub const CKPT_TAG: &str = "cogrind-ckpt-v1";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a {CKPT_TAG} file: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ordered map of parameter paths to tensors.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    items: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Paths are unique; a duplicate is a wiring bug.
    pub fn insert(&mut self, path: &str, value: Tensor) {
        let prev = self.items.insert(path.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter path {path:?}");
    }

    /// Register a parameter initialized uniformly on `[-bound, bound]`.
    pub fn insert_uniform(&mut self, path: &str, shape: &[usize], bound: Real, rng: &mut ChaCha8Rng) {
        let numel: usize = shape.iter().product();
        let data: Vec<Real> = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(path, Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction"));
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.items.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.items.get_mut(path)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.items.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.items.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.items.keys().map(String::as_str)
    }

    /// Put every parameter on a tape, as trainable leaves when `trainable`
    /// (training) or constants otherwise (inference).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bindings, TensorError> {
        let mut ids = IndexMap::with_capacity(self.items.len());
        for (path, value) in &self.items {
            let id = if trainable { tape.leaf(value.clone())? } else { tape.constant(value.clone())? };
            ids.insert(path.clone(), id);
        }
        Ok(Bindings { ids })
    }

    /// Bind every parameter as a constant except `path`, which maps to the
    /// caller-provided node. Gradient checks use this to probe a single
    /// tensor while the rest of the model stays frozen.
    pub fn bind_except(&self, tape: &mut Tape, path: &str, id: TensorId) -> Result<Bindings, TensorError> {
        let mut ids = IndexMap::with_capacity(self.items.len());
        let mut found = false;
        for (name, value) in &self.items {
            if name == path {
                ids.insert(name.clone(), id);
                found = true;
            } else {
                ids.insert(name.clone(), tape.constant(value.clone())?);
            }
        }
        assert!(found, "parameter path {path:?} not in store");
        Ok(Bindings { ids })
    }

    pub fn save(&self, path: &Path) -> Result<(), CkptError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(CKPT_TAG.len() as u32).to_le_bytes())?;
        w.write_all(CKPT_TAG.as_bytes())?;
        w.write_all(&(self.items.len() as u64).to_le_bytes())?;
        for (name, value) in &self.items {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(value.ndim() as u32).to_le_bytes())?;
            for &d in value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CkptError> {
        let mut r = BufReader::new(File::open(path)?);
        let tag_len = read_u32(&mut r)? as usize;
        if tag_len > 256 {
            return Err(CkptError::Format(format!("implausible tag length {tag_len}")));
        }
        let mut tag = vec![0u8; tag_len];
        r.read_exact(&mut tag).map_err(|_| CkptError::Format("truncated tag".into()))?;
        let tag = String::from_utf8(tag).map_err(|_| CkptError::Format("tag is not UTF-8".into()))?;
        if tag != CKPT_TAG {
            return Err(CkptError::Format(format!("version tag {tag:?}")));
        }
        let count = read_u64(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| CkptError::Format("truncated entry name".into()))?;
            let name = String::from_utf8(name).map_err(|_| CkptError::Format("entry name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf).map_err(|_| CkptError::Format(format!("truncated data for {name:?}")))?;
                data.push(Real::from_le_bytes(buf));
            }
            store.insert(&name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, CkptError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| CkptError::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CkptError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| CkptError::Format("truncated header".into()))?;
    Ok(u64::from_le_bytes(buf))
}

/// Tape handles of the bound parameters for one forward pass.
pub struct Bindings {
    ids: IndexMap<String, TensorId>,
}

impl Bindings {
    /// Handle for a path. Panics on unknown paths: model wiring refers to
    /// parameters it registered itself, so a miss is a programming error.
    pub fn p(&self, path: &str) -> TensorId {
        *self.ids.get(path).unwrap_or_else(|| panic!("parameter path {path:?} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
