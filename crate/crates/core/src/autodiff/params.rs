//! Named parameter registry and the binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   b"FGCK"
//! version u32            (currently 1)
//! meta    u64 len + UTF-8 bytes (free-form, usually a JSON config echo)
//! count   u64
//! entries: name (u32 len + UTF-8), kind u8 (0 trainable, 1 buffer),
//!          ndim u32, dims u64 x ndim, values f64 x prod(dims)
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FGCK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State carried alongside parameters (running batch-norm statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Parameters in registration order, addressable by id or name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        ensure!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {:?}",
            name
        );
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            kind,
            value,
            grad,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(i, _)| ParamId(i))
    }

    pub fn num_trainable_values(&self) -> usize {
        self.trainable().map(|id| self.value(id).len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Add gradients from one backward pass into the stored accumulators.
    pub fn accumulate(&mut self, grads: &super::graph::Gradients) {
        for (id, g) in grads.params() {
            self.entries[id.0].grad.add_assign(g);
        }
    }

    /// Overwrite values of trainable entries from another store with the
    /// same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        ensure!(
            self.entries.len() == other.entries.len(),
            "parameter layouts differ ({} vs {} entries)",
            self.entries.len(),
            other.entries.len()
        );
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            ensure!(
                a.name == b.name && a.value.shape() == b.value.shape(),
                "parameter {:?} does not match {:?}",
                a.name,
                b.name
            );
            a.value = b.value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self, meta: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, String)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let meta_len = r.u64()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let count = r.u64()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::format("checkpoint", e.to_string()))?;
            let kind = match r.take(1)?[0] {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(Error::format("checkpoint", format!("unknown kind {k}"))),
            };
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            store
                .add(name, kind, Tensor::new(shape, data)?)
                .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        std::fs::write(path, self.to_bytes(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(ParamStore, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint", "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", ParamKind::Trainable, Tensor::zeros(vec![2])).unwrap();
        assert!(s.add("w", ParamKind::Trainable, Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let mut s = ParamStore::new();
        s.add("w", ParamKind::Trainable, Tensor::full(vec![3], 1.5)).unwrap();
        let bytes = s.to_bytes("{}");
        let err = ParamStore::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.is_io());
        assert!(ParamStore::from_bytes(b"nope").is_err());
    }

    #[test]
    fn header_layout_is_fixed() {
        let mut s = ParamStore::new();
        s.add("a", ParamKind::Buffer, Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let b = s.to_bytes("m");
        let mut expected = b"FGCK".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.push(b'm');
        expected.extend(1u64.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.push(b'a');
        expected.push(1);
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        assert_eq!(b, expected);
    }

    proptest! {
        #[test]
        fn checkpoint_round_trips_bit_exactly(
            values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
            meta in "[a-z{}\":0-9]{0,20}",
        ) {
            let mut s = ParamStore::new();
            let n = values.len();
            s.add("layer.weight", ParamKind::Trainable, Tensor::new(vec![n], values).unwrap()).unwrap();
            s.add("layer.running_mean", ParamKind::Buffer, Tensor::full(vec![1, 2], -0.0)).unwrap();
            let bytes = s.to_bytes(&meta);
            let (back, m) = ParamStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(m, meta);
            prop_assert_eq!(back.to_bytes(""), s.to_bytes(""));
        }
    }
}
