use std::collections::HashMap;

use crate::error::{DstError, Result};
use crate::numerics::{ParamId, ParamSource, Tensor};
use crate::slim_layers::{slicing_tag, Axis};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub axes: Vec<Axis>,
}

impl ParamEntry {
    pub fn slicing_tag(&self) -> &'static str {
        slicing_tag(&self.axes)
    }

    /// Whether any dimension follows the active width.
    pub fn is_slimmable(&self) -> bool {
        self.axes.iter().any(|&a| a != Axis::Full)
    }
}

/// Named master tensors, addressed by registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamSource for ParamStore {
    fn param_tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id].tensor
    }
}

impl ParamStore {
    /// Panics on a duplicate name or an axis list that does not match the rank.
    pub fn insert(&mut self, name: String, tensor: Tensor, axes: Vec<Axis>) -> ParamId {
        assert_eq!(axes.len(), tensor.shape().len(), "axes of {name}");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, tensor, axes });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// FNV-1a over every name, shape and value bit pattern.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for &s in e.tensor.shape() {
                eat(&(s as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Replace every tensor with the same-named tensor of `other`.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_compatible(other)?;
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            dst.tensor = src.tensor.clone();
        }
        Ok(())
    }

    /// Same names, shapes and axes in the same order.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(DstError::Config(format!(
                "parameter stores hold {} and {} tensors",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() || a.axes != b.axes {
                return Err(DstError::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::default();
        let id = s.insert("w".into(), Tensor::zeros(&[2, 2]), vec![Axis::Model, Axis::Full]);
        let before = s.checksum();
        assert_eq!(before, s.clone().checksum());
        s.tensor_mut(id).data_mut()[3] = -0.0;
        assert_ne!(before, s.checksum());
        assert_eq!(s.entry(id).slicing_tag(), "slim-rows");
        assert_eq!(s.id("w"), Some(id));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::default();
        s.insert("w".into(), Tensor::zeros(&[1]), vec![Axis::Full]);
        s.insert("w".into(), Tensor::zeros(&[1]), vec![Axis::Full]);
    }

    #[test]
    fn copy_requires_matching_layout() {
        let mut a = ParamStore::default();
        a.insert("w".into(), Tensor::zeros(&[2]), vec![Axis::Full]);
        let mut b = ParamStore::default();
        b.insert("w".into(), Tensor::full(&[2], 1.0), vec![Axis::Full]);
        a.copy_from(&b).unwrap();
        assert_eq!(a, b);
        let mut c = ParamStore::default();
        c.insert("w".into(), Tensor::zeros(&[3]), vec![Axis::Full]);
        assert!(a.copy_from(&c).is_err());
    }
}
