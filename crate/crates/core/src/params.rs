//! Named parameter collections and the versioned binary parameter file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "PFPARAM\0"
//! version    u32       1
//! meta_len   u32       length of the JSON metadata block
//! meta       bytes     UTF-8 JSON (model kind and configuration)
//! count      u32       number of tensors
//! per tensor:
//!   name_len u32, name bytes, ndim u32, dims u64 × ndim, data f64 × product(dims)
//! ```

use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PFPARAM\0";
pub const FORMAT_VERSION: u32 = 1;

/// Ordered list of named tensors. Order is part of the structure: two sets
/// are structurally equal only if names and shapes agree position by position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Arc<Tensor>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), Arc::new(tensor)));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_ref())
    }

    pub fn shared(&self, name: &str) -> Option<Arc<Tensor>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone())
    }

    pub fn shared_at(&self, index: usize) -> Arc<Tensor> {
        self.entries[index].1.clone()
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[index].1)
    }

    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    /// `self ← self + alpha · delta`, tensor by tensor. `None` deltas are
    /// treated as zero.
    pub fn axpy(&mut self, alpha: f64, deltas: &[Option<Tensor>]) -> Result<()> {
        if deltas.len() != self.entries.len() {
            return Err(Error::shape("axpy", &[self.entries.len()], &[deltas.len()]));
        }
        if alpha == 0.0 {
            return Ok(());
        }
        for (i, delta) in deltas.iter().enumerate() {
            let Some(delta) = delta else { continue };
            if delta.shape() != self.entries[i].1.shape() {
                return Err(Error::shape("axpy", self.entries[i].1.shape(), delta.shape()));
            }
            let target = Arc::make_mut(&mut self.entries[i].1);
            for (p, d) in target.data_mut().iter_mut().zip(delta.data()) {
                *p += alpha * d;
            }
        }
        Ok(())
    }

    /// Flat view of all parameters, in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// True if every element is bit-identical (NaN payloads included).
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.same_structure(other)
            && self.entries.iter().zip(&other.entries).all(|((_, a), (_, b))| {
                a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    fn write_tensors(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    /// SHA-256 over names, shapes and values (metadata excluded), hex encoded.
    pub fn content_digest(&self) -> String {
        let mut buf = Vec::with_capacity(16 + self.num_scalars() * 8);
        self.write_tensors(&mut buf);
        hex::encode(Sha256::digest(&buf))
    }

    pub fn encode(&self, meta: &serde_json::Value) -> Vec<u8> {
        let meta = serde_json::to_vec(meta).expect("json value serializes");
        let mut out = Vec::with_capacity(24 + meta.len() + self.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        self.write_tensors(&mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, ParamSet)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: serde_json::Value = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format(format!("tensor name: {e}")))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            set.push(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok((meta, set))
    }

    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        std::fs::write(path, self.encode(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(serde_json::Value, ParamSet)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ParamSet::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE]).unwrap());
        p.push("b", Tensor::vector(vec![0.0, -0.0]));
        p
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode(&serde_json::json!({"kind": "test"}));
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(ParamSet::decode(b"nope").is_err());
        let mut bytes = sample().encode(&serde_json::json!({}));
        bytes.push(0);
        assert!(matches!(ParamSet::decode(&bytes), Err(Error::Format(_))));
        let bytes = sample().encode(&serde_json::json!({}));
        assert!(ParamSet::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = sample();
        let mut b = sample();
        assert_eq!(a.content_digest(), b.content_digest());
        b.tensor_mut(1).data_mut()[0] = 1e-300;
        assert_ne!(a.content_digest(), b.content_digest());
    }

    #[test]
    fn axpy_skips_missing() {
        let mut p = sample();
        p.axpy(-0.5, &[None, Some(Tensor::vector(vec![2.0, 4.0]))]).unwrap();
        assert_eq!(p.get("b").unwrap().data(), &[-1.0, -2.0]);
        assert_eq!(p.get("w").unwrap(), sample().get("w").unwrap());
        assert!(p.axpy(1.0, &[None]).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(w in prop::collection::vec(any::<f64>(), 6), b in prop::collection::vec(any::<f64>(), 3)) {
            let mut p = ParamSet::new();
            p.push("layer.w", Tensor::matrix(2, 3, w).unwrap());
            p.push("layer.b", Tensor::vector(b));
            let meta = serde_json::json!({"kind": "generator", "hidden": 3});
            let (meta2, back) = ParamSet::decode(&p.encode(&meta)).unwrap();
            prop_assert_eq!(meta2, meta);
            prop_assert!(back.bit_eq(&p));
        }
    }
}
