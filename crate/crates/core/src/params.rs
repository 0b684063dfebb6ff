//! Named, ordered parameter collections.

use sha2::{Digest, Sha256};

use crate::autograd::Gradients;
use crate::error::Result;
use crate::tensor::Tensor;

/// Parameters in insertion order. A parameter's position is its graph slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(self.slot(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, tensor));
        self.entries.len() - 1
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn by_slot(&self, slot: usize) -> &Tensor {
        &self.entries[slot].1
    }

    pub fn by_slot_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.entries[slot].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Add the parameter gradients of one backward pass, scaled by `weight`.
    pub fn accumulate(&mut self, grads: &Gradients, weight: f32) -> Result<()> {
        for (slot, g) in grads.params() {
            if weight == 1.0 {
                self.entries[slot].1.accumulate_grad(&g)?;
            } else {
                let scaled: Vec<f32> = g.iter().map(|v| v * weight).collect();
                self.entries[slot].1.accumulate_grad(&scaled)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().for_each(|t| t.zero_grad());
    }

    /// SHA-256 over names, shapes and the exact bits of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}
