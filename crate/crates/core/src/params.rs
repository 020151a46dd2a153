//! Named parameter storage, per-graph binding, and the checkpoint format.
//!
//! Parameters live outside any autodiff graph as plain `Vec<f64>`. A forward
//! pass calls [`ParamRegistry::bind`] to get fresh leaf tensors, so the same
//! model can be bound on several threads at once and the optimizer can
//! mutate values between passes.
//!
//! # Checkpoint layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic      8 bytes   "GCCKPT01"
//! count      u32       number of entries
//! entry*     repeated `count` times, in registry order:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   rank     u32
//!   dims     rank × u64
//!   values   prod(dims) × f64 (IEEE-754 binary64, LE)
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GCCKPT01";

/// Handle into a [`ParamRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered, uniquely named set of trainable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamRegistry {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("register", shape, &[data.len()]));
        }
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Fresh leaf tensors for one graph execution.
    pub fn bind(&self, track_grad: bool) -> Bound {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                if track_grad {
                    Tensor::param(e.data.clone(), &e.shape)
                } else {
                    Tensor::new(e.data.clone(), &e.shape)
                }
                .expect("registry entries are shape-checked")
            })
            .collect();
        Bound { tensors }
    }

    /// Overwrites values from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamRegistry) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} entries, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.shape != theirs.shape {
                return Err(Error::Checkpoint(format!(
                    "entry `{}` {:?} does not match `{}` {:?}",
                    mine.name, mine.shape, theirs.name, theirs.shape
                )));
            }
            mine.data.clone_from(&theirs.data);
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamRegistry> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let count = cur.u32()? as usize;
        let mut reg = ParamRegistry::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = cur.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            reg.register(&name, &shape, data)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ParamRegistry> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        ParamRegistry::read_checkpoint(std::io::BufReader::new(file))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Leaf tensors for every registry entry, valid for one graph.
pub struct Bound {
    tensors: Vec<Tensor>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Gradients in registry order; zeros where backward never reached.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        reg.register("a.weight", &[2, 3], (0..6).map(|i| i as f64 * 0.5).collect())
            .unwrap();
        reg.register("a.bias", &[2], vec![-1.0, f64::MIN_POSITIVE]).unwrap();
        reg
    }

    #[test]
    fn names_unique_and_total_counts() {
        let mut reg = sample();
        assert_eq!(reg.total(), 8);
        assert!(reg.register("a.bias", &[1], vec![0.0]).is_err());
        assert_eq!(reg.id("a.bias").unwrap().index(), 1);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let reg = sample();
        let mut buf = Vec::new();
        reg.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let back = ParamRegistry::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, reg);
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let mut buf = Vec::new();
        sample().write_checkpoint(&mut buf).unwrap();
        buf.pop();
        assert!(ParamRegistry::read_checkpoint(&buf[..]).is_err());
        assert!(ParamRegistry::read_checkpoint(&b"NOTACKPT"[..]).is_err());
    }

    #[test]
    fn copy_values_requires_same_layout() {
        let mut a = sample();
        let mut b = sample();
        b.entry_mut(ParamId(0)).data[0] = 42.0;
        a.copy_values_from(&b).unwrap();
        assert_eq!(a.entry(ParamId(0)).data[0], 42.0);
        let mut other = ParamRegistry::new();
        other.register("x", &[1], vec![0.0]).unwrap();
        assert!(a.copy_values_from(&other).is_err());
    }
}
