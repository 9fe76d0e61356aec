//! Named parameter storage and the flat binary checkpoint format.
//!
//! A checkpoint is a sequence of records, one per tensor, until end of file:
//!
//! ```text
//! u32 LE   name length in bytes
//! [u8]     UTF-8 name
//! u32 LE   rank
//! u64 LE   dims, `rank` of them
//! f64 LE   values, product(dims) of them
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    trainable: bool,
}

/// Trainable parameters plus non-trainable buffers (running statistics).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(Entry {
            name: name.to_string(),
            grad: vec![0.0; value.len()],
            value,
            trainable,
        });
        ParamId(id)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Mutable value and gradient of one parameter.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [f64], &[f64]) {
        let e = &mut self.entries[id.0];
        (&mut e.value.data, &e.grad)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &[f64]) {
        let e = &mut self.entries[id.0];
        e.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    /// Add the gradients a graph computed for its parameter leaves.
    pub fn accumulate_grads(&mut self, graph: &super::Graph) {
        for (id, g) in graph.param_grads() {
            self.add_grad(id, g);
        }
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.value.shape.len() as u32).to_le_bytes());
            for &d in &e.value.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &e.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Overwrite values from a checkpoint. Every stored tensor must already be
    /// registered with the same shape, and every registered tensor must be present.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let tensors = decode_checkpoint(bytes)?;
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in tensors {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint has unknown tensor {name}")))?;
            let e = &mut self.entries[id.0];
            if e.value.shape != t.shape {
                return Err(shape_err!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    t.shape,
                    e.value.shape
                ));
            }
            e.value = t;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Invalid(format!(
                "checkpoint is missing tensor {}",
                self.entries[i].name
            )));
        }
        Ok(())
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Invalid(format!("checkpoint truncated at byte {pos}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < bytes.len() {
        let n = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(bytes, &mut pos, n)?.to_vec())
            .map_err(|_| Error::Invalid("checkpoint name is not UTF-8".into()))?;
        let rank = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let raw = take(bytes, &mut pos, count.checked_mul(8).ok_or_else(|| Error::Invalid("checkpoint dims overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor { shape, data }));
    }
    Ok(out)
}

pub fn write_checkpoint(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>, store: &mut ParamStore) -> Result<()> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    store.load_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::new();
        s.add("conv.weight", Tensor::new(vec![2, 1, 1, 1], vec![0.5, -1.25]).unwrap());
        s.add_buffer("bn.running_var", Tensor::full(&[3], 1.0));
        let bytes = s.to_bytes();
        // 4 + 11 + 4 + 4*8 + 2*8 for the first record
        assert_eq!(&bytes[..4], &11u32.to_le_bytes());
        let mut t = s.clone();
        t.value_mut(ParamId(0)).data = vec![0.0, 0.0];
        t.load_bytes(&bytes).unwrap();
        assert_eq!(t.value(ParamId(0)).data, vec![0.5, -1.25]);
        assert_eq!(t.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_mismatch_errors() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[2]));
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[3]));
        assert!(s.load_bytes(&other.to_bytes()).is_err());
        assert!(s.load_bytes(&s.to_bytes()[..10]).is_err());
        let mut missing = ParamStore::new();
        missing.add("a", Tensor::zeros(&[2]));
        missing.add("b", Tensor::zeros(&[2]));
        assert!(missing.load_bytes(&s.to_bytes()).is_err());
    }
}
