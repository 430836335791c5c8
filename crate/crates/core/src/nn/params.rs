use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of model tensors.
///
/// Non-trainable buffers (batch-norm running statistics) live in the same store
/// with `trainable = false` so they are saved and hashed alongside the weights.
#[derive(Clone, Debug)]
pub struct ParamStore<E = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    trainable: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<E>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.get(id).numel())
            .sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and little-endian f32 values in insertion order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update((v.f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Serializes to safetensors bytes (f32). Output is deterministic.
    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        let bufs: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                let bytes = t
                    .data()
                    .iter()
                    .flat_map(|v| (v.f64() as f32).to_le_bytes())
                    .collect();
                (n.clone(), t.shape().to_vec(), bytes)
            })
            .collect();
        let views = bufs
            .iter()
            .map(|(n, s, b)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (n.as_str(), v))
                    .map_err(|e| Error::TensorFile {
                        path: n.into(),
                        reason: e.to_string(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, None).map_err(|e| Error::TensorFile {
            path: "<memory>".into(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_safetensors()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Overwrites every tensor of this store with the same-named tensor in `path`.
    ///
    /// The file must contain exactly the store's names with matching shapes.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_from_bytes(&bytes, path)
    }

    pub fn load_from_bytes(&mut self, bytes: &[u8], path: &Path) -> Result<()> {
        let bad = |reason: String| Error::TensorFile {
            path: path.to_path_buf(),
            reason,
        };
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        if st.len() != self.len() {
            return Err(bad(format!("expected {} tensors, found {}", self.len(), st.len())));
        }
        for i in 0..self.tensors.len() {
            let view = st
                .tensor(&self.names[i])
                .map_err(|_| bad(format!("missing tensor {}", self.names[i])))?;
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!("{} is not f32", self.names[i])));
            }
            if view.shape() != self.tensors[i].shape() {
                return Err(bad(format!(
                    "{}: shape {:?} does not match {:?}",
                    self.names[i],
                    view.shape(),
                    self.tensors[i].shape()
                )));
            }
            let dst = self.tensors[i].data_mut();
            for (d, chunk) in dst.iter_mut().zip(view.data().chunks_exact(4)) {
                *d = E::of(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn safetensors_round_trip_and_hash() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b.weight", Tensor::from_vec(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap(), true);
        s.insert("a.bias", Tensor::from_vec(vec![3], vec![0.1, 0.2, 0.3]).unwrap(), false);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        s.save(&p).unwrap();
        let mut t = s.clone();
        t.get_mut(ParamId(0)).data_mut()[0] = 9.0;
        assert_ne!(t.content_hash(), s.content_hash());
        t.load_into(&p).unwrap();
        assert_eq!(t.content_hash(), s.content_hash());
        assert_eq!(s.to_safetensors().unwrap(), t.to_safetensors().unwrap());
        assert_eq!(s.trainable_count(), 4);
        assert_eq!(s.count(), 7);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(vec![2, 2]), true);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        s.save(&p).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.insert("w", Tensor::zeros(vec![4]), true);
        assert!(other.load_into(&p).is_err());
    }
}
