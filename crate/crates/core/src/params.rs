//! Named learnable tensors and the checkpoint file format.
//!
//! Checkpoint layout (little-endian, no padding):
//! `"YMWML001"` · u32 count · per tensor { u32 name_len, name bytes,
//! u32 ndim, u64 dims[ndim], f64 data[∏dims] }.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"YMWML001";

/// Position of a parameter in its store's registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered map from name to tensor. Iteration follows registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        if !tensor.requires_grad() {
            tensor.set_requires_grad(true);
        }
        let (idx, _) = self.tensors.insert_full(name, tensor);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter on `tape`. With `trainable == false` the
    /// parameters are constants and the forward pass records no backward.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .values()
            .map(|t| {
                if trainable {
                    tape.param(t.detached())
                } else {
                    tape.constant(t.detached())
                }
            })
            .collect()
    }

    /// Accumulates the tape gradients of a trainable binding into each
    /// parameter's gradient buffer.
    pub fn collect_grads(&mut self, tape: &Tape, binding: &[Var]) -> Result<()> {
        for ((name, tensor), &var) in self.tensors.iter_mut().zip(binding) {
            match tape.grad(var)? {
                Some(g) => tensor.accumulate_grad(g.data())?,
                // Unused parameters (e.g. a disconnected branch) get zero.
                None if tensor.grad().is_some() => {}
                None => return Err(Error::MissingGradient(name.clone())),
            }
        }
        Ok(())
    }

    /// Confirms `self` has exactly the names and shapes of `reference`.
    pub fn check_compatible(&self, reference: &ParameterStore) -> Result<()> {
        for (name, want) in reference.iter() {
            let have = self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            if have.shape() != want.shape() {
                return Err(Error::ShapeDisagreement {
                    name: name.to_string(),
                    expected: want.shape().to_vec(),
                    found: have.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.names().find(|n| reference.get(n).is_none()) {
            return Err(Error::ShapeDisagreement {
                name: extra.to_string(),
                expected: Vec::new(),
                found: self.get(extra).map(|t| t.shape().to_vec()).unwrap_or_default(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            t.check_finite("save_checkpoint")?;
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut bytes, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let count = read_u32(&mut bytes)?;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let len = read_u32(&mut bytes)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut bytes, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::MalformedHeader("checkpoint tensor name".into()))?;
            let ndim = read_u32(&mut bytes)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut bytes, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            if numel.saturating_mul(8) > bytes.len() {
                return Err(Error::Truncated("checkpoint".into()));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                read_exact(&mut bytes, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            store.insert(name, Tensor::new(&shape, data)?)?;
        }
        if !bytes.is_empty() {
            return Err(Error::MalformedHeader("checkpoint has trailing bytes".into()));
        }
        Ok(store)
    }
}

fn read_exact(src: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    src.read_exact(buf).map_err(|_| Error::Truncated("checkpoint".into()))
}

fn read_u32(src: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(src, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<()> {
    let bytes = store.to_bytes()?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ParameterStore::from_bytes(&bytes)
}

/// Registers named parameters with deterministic initialization.
pub struct ParamBuilder<'a> {
    store: &'a mut ParameterStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParameterStore, rng: &'a mut Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_>) -> T) -> T {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut inner = ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut inner)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform in ±sqrt(6 / fan_in).
    pub fn kaiming_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, self.rng)?;
        self.store.insert(self.full_name(name), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let t = Tensor::full(shape, value)?;
        self.store.insert(self.full_name(name), t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut rng = Rng::new(5);
        let mut store = ParameterStore::new();
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        b.scope("layer", |b| {
            b.kaiming_uniform("weight", &[2, 3, 1, 1], 3).unwrap();
            b.constant("bias", &[2], 0.0).unwrap();
        });
        store
    }

    #[test]
    fn scoped_names_in_registration_order() {
        let store = sample_store();
        let names: Vec<_> = store.names().collect();
        assert_eq!(names, ["layer.weight", "layer.bias"]);
        assert_eq!(store.numel(), 8);
        let bound = (6.0f64 / 3.0).sqrt();
        assert!(store
            .get("layer.weight")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::new();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(store.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn bytes_round_trip() {
        let store = sample_store();
        let bytes = store.to_bytes().unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = ParameterStore::from_bytes(&bytes).unwrap();
        for ((n1, t1), (n2, t2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn corrupt_files_report_distinct_errors() {
        let bytes = sample_store().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ParameterStore::from_bytes(&bad), Err(Error::BadMagic)));
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(ParameterStore::from_bytes(short), Err(Error::Truncated(_))));
    }

    #[test]
    fn compatibility_names_offending_tensor() {
        let store = sample_store();
        let mut other = ParameterStore::new();
        other
            .insert("layer.weight", Tensor::zeros(&[2, 4, 1, 1]).unwrap())
            .unwrap();
        other.insert("layer.bias", Tensor::zeros(&[2]).unwrap()).unwrap();
        match other.check_compatible(&store) {
            Err(Error::ShapeDisagreement { name, .. }) => assert_eq!(name, "layer.weight"),
            e => panic!("unexpected {e:?}"),
        }
        assert!(store.check_compatible(&store).is_ok());
    }
}
