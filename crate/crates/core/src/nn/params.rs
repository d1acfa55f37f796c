use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::graph::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

const MAGIC: &[u8; 4] = b"NPW1";

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Registers a tensor drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::from_rows(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn num_weights(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Little-endian archive: magic, count, then per tensor the name,
    /// shape and raw `f64` bits.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_weights() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.values) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint("truncated weight archive".into()))?;
            Ok(buf)
        }
        if &take::<4>(&mut bytes)? != MAGIC {
            return Err(Error::Checkpoint("not a weight archive".into()));
        }
        let count = u32::from_le_bytes(take(&mut bytes)?) as usize;
        let mut store = ParamStore::default();
        for _ in 0..count {
            let len = u32::from_le_bytes(take(&mut bytes)?) as usize;
            if bytes.len() < len {
                return Err(Error::Checkpoint("truncated weight archive".into()));
            }
            let name = String::from_utf8(bytes[..len].to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            bytes = &bytes[len..];
            let rows = u32::from_le_bytes(take(&mut bytes)?) as usize;
            let cols = u32::from_le_bytes(take(&mut bytes)?) as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_le_bytes(take(&mut bytes)?));
            }
            if store.index.contains_key(&name) {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            store.add(name, Tensor::from_rows(rows, cols, data));
        }
        if !bytes.is_empty() {
            return Err(Error::Checkpoint("trailing bytes in weight archive".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let t = self.get(id);
        if (t.rows, t.cols) != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {}x{}, expected {rows}x{cols}",
                t.rows, t.cols
            )));
        }
        Ok(id)
    }
}
