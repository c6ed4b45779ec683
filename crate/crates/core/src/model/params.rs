use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{MetroError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

/// Named tensors in registration order. Buffers (non-trainable entries) ride
/// along in checkpoints but never receive gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

/// Graph leaves for every entry of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    /// Wraps vars given in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(MetroError::Validation(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = self.get(id);
        if cur.shape() != value.shape() {
            return Err(MetroError::dim("set_param", cur.shape(), value.shape()));
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    /// Adds every entry to `g` as a leaf; trainable entries require gradients.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        ParamVars(
            self.entries
                .iter()
                .map(|e| g.leaf_shared(Arc::clone(&e.value), e.trainable))
                .collect(),
        )
    }

    /// Adds every entry as a constant leaf (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> ParamVars {
        ParamVars(
            self.entries
                .iter()
                .map(|e| g.leaf_shared(Arc::clone(&e.value), false))
                .collect(),
        )
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Rounds every value to the nearest single-precision number, the storage
    /// precision of checkpoints.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            if e.value.data().iter().all(|&x| x as f32 as f64 == x) {
                continue;
            }
            Arc::make_mut(&mut e.value)
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = *x as f32 as f64);
        }
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn checksum(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in e.value.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Normal(0, σ) samples redrawn until they fall within two standard deviations.
pub fn truncated_normal<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = dist.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}
