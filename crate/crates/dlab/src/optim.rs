//! Named parameter store with per-parameter Adam state.
//!
//! Names are unique and shapes are immutable after creation. Each parameter
//! keeps its own step count so tensors updated in different phases of a
//! training step stay correctly bias-corrected.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::archive::{self, ArchiveError};
use crate::tensor::Tensor;

/// Adam hyper-parameters. Defaults follow the style-GAN lineage conventions:
/// lr 1e-3, β₁ 0.0, β₂ 0.99, ε 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("duplicate parameter name '{0}'")]
    DuplicateName(String),
    #[error("parameter name '{0}' contains reserved character '#'")]
    ReservedName(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("parameter '{name}': shape {got:?} does not match stored {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("non-finite value in parameter '{0}' after update")]
    NonFiniteParam(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("checkpoint: missing companion tensor '{0}'")]
    MissingCompanion(String),
}

#[derive(Debug, Clone)]
struct Slot {
    value: Tensor,
    m: Tensor,
    v: Tensor,
    t: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    slots: BTreeMap<String, Slot>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), OptimError> {
        if name.contains('#') {
            return Err(OptimError::ReservedName(name.to_string()));
        }
        if self.slots.contains_key(name) {
            return Err(OptimError::DuplicateName(name.to_string()));
        }
        let shape = value.shape().to_vec();
        self.slots.insert(
            name.to_string(),
            Slot {
                value,
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                t: 0,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    /// Replace a parameter's value. The shape is immutable.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), OptimError> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| OptimError::UnknownParam(name.to_string()))?;
        if slot.value.shape() != value.shape() {
            return Err(OptimError::ShapeMismatch {
                name: name.to_string(),
                expected: slot.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor, u64)> {
        self.slots.get(name).map(|s| (&s.m, &s.v, s.t))
    }

    /// One Adam update for every parameter present in `grads`. Parameters
    /// without a gradient keep their value but still decay their moments,
    /// matching the treatment of an explicit zero gradient.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        hp: &AdamHyper,
    ) -> Result<(), OptimError> {
        for (name, grad) in grads {
            if !grad.is_finite() {
                return Err(OptimError::NonFiniteGradient(name.clone()));
            }
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| OptimError::UnknownParam(name.clone()))?;
            if slot.value.shape() != grad.shape() {
                return Err(OptimError::ShapeMismatch {
                    name: name.clone(),
                    expected: slot.value.shape().to_vec(),
                    got: grad.shape().to_vec(),
                });
            }
            slot.t += 1;
            let bc1 = 1.0 - hp.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - hp.beta2.powi(slot.t as i32);
            let (vals, ms, vs) = (
                slot.value.data_mut(),
                slot.m.data_mut(),
                slot.v.data_mut(),
            );
            for ((w, m), (v, g)) in vals
                .iter_mut()
                .zip(ms.iter_mut())
                .zip(vs.iter_mut().zip(grad.data()))
            {
                *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
                *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
            if !slot.value.is_finite() {
                return Err(OptimError::NonFiniteParam(name.clone()));
            }
        }
        Ok(())
    }

    /// Checkpoint: every parameter with its Adam moments and step count.
    pub fn save(&self, path: &Path) -> Result<(), OptimError> {
        let mut entries: Vec<(String, &Tensor)> = Vec::with_capacity(self.slots.len() * 4);
        let step_tensors: Vec<(String, Tensor)> = self
            .slots
            .iter()
            .map(|(name, slot)| (format!("{name}#t"), Tensor::scalar(slot.t as f64)))
            .collect();
        for (name, slot) in &self.slots {
            entries.push((name.clone(), &slot.value));
            entries.push((format!("{name}#m"), &slot.m));
            entries.push((format!("{name}#v"), &slot.v));
        }
        for (name, t) in &step_tensors {
            entries.push((name.clone(), t));
        }
        archive::write_archive(path, &entries)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, OptimError> {
        let entries = archive::read_archive(path)?;
        let mut map: BTreeMap<String, Tensor> = entries.into_iter().collect();
        let names: Vec<String> = map
            .keys()
            .filter(|k| !k.contains('#'))
            .cloned()
            .collect();
        let mut store = ParameterStore::new();
        for name in names {
            let value = map.remove(&name).unwrap();
            let m = map
                .remove(&format!("{name}#m"))
                .ok_or_else(|| OptimError::MissingCompanion(format!("{name}#m")))?;
            let v = map
                .remove(&format!("{name}#v"))
                .ok_or_else(|| OptimError::MissingCompanion(format!("{name}#v")))?;
            let t = map
                .remove(&format!("{name}#t"))
                .ok_or_else(|| OptimError::MissingCompanion(format!("{name}#t")))?;
            store.slots.insert(
                name,
                Slot {
                    value,
                    m,
                    v,
                    t: t.item() as u64,
                },
            );
        }
        Ok(store)
    }

    /// Bitwise equality of values, moments, and step counts.
    pub fn bit_identical(&self, other: &ParameterStore) -> bool {
        if self.slots.len() != other.slots.len() {
            return false;
        }
        self.slots.iter().zip(other.slots.iter()).all(|((na, a), (nb, b))| {
            na == nb
                && a.t == b.t
                && bits(&a.value) == bits(&b.value)
                && bits(&a.m) == bits(&b.m)
                && bits(&a.v) == bits(&b.v)
        })
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Sum gradient maps elementwise (used to reduce per-sample gradients).
pub fn accumulate_grads(
    into: &mut BTreeMap<String, Tensor>,
    from: BTreeMap<String, Tensor>,
) {
    for (name, grad) in from {
        match into.get_mut(&name) {
            Some(acc) => acc.add_assign(&grad),
            None => {
                into.insert(name, grad);
            }
        }
    }
}

/// Scale every gradient in the map (used to average over a batch).
pub fn scale_grads(grads: &mut BTreeMap<String, Tensor>, s: f64) {
    for g in grads.values_mut() {
        g.scale_assign(s);
    }
}
