//! Named trainable arrays, their gradient buffers, and the JSON checkpoint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

/// Owner of every parameter in a model.
///
/// Reads through [`ParamStore::read`] are counted per parameter so callers can
/// assert which parts of a model a code path touched.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    reads: Vec<AtomicU64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.clone(),
            value,
            grad: Tensor::zeros(r, c),
            frozen,
        });
        self.by_name.insert(name, id);
        self.reads.push(AtomicU64::new(0));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    /// Counted read of a parameter value.
    pub fn read(&self, id: ParamId) -> &Tensor {
        self.reads[id.0].fetch_add(1, Ordering::Relaxed);
        &self.params[id.0].value
    }

    pub fn read_count(&self, id: ParamId) -> u64 {
        self.reads[id.0].load(Ordering::Relaxed)
    }

    pub fn reset_read_counts(&self) {
        for r in &self.reads {
            r.store(0, Ordering::Relaxed);
        }
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &Tensor) {
        let p = &mut self.params[id.0];
        if !p.frozen {
            p.grad.add_assign(g);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of trainable scalars among parameters whose name starts
    /// with `prefix`.
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen && p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Serializes all parameters as one JSON object keyed by name. Floats are
    /// written with 17 significant digits so a reload is value-exact.
    pub fn to_checkpoint_json(&self) -> String {
        let mut out = String::from("{\n");
        for (i, (name, id)) in self.by_name.iter().enumerate() {
            let p = &self.params[id.0];
            let (r, c) = p.value.shape();
            let _ = write!(
                out,
                "  {}: {{\"shape\": [{r}, {c}], \"frozen\": {}, \"data\": [",
                serde_json::to_string(name).expect("string serializes"),
                p.frozen
            );
            for (j, v) in p.value.data().iter().enumerate() {
                if j > 0 {
                    out.push_str(", ");
                }
                let _ = write!(out, "{v:.16e}");
            }
            out.push_str("]}");
            out.push_str(if i + 1 < self.by_name.len() {
                ",\n"
            } else {
                "\n"
            });
        }
        out.push_str("}\n");
        out
    }

    /// Overwrites parameter values from a checkpoint document. Every stored
    /// parameter must be present with a matching shape and frozen flag.
    pub fn load_checkpoint_json(&mut self, json: &str) -> Result<()> {
        let entries: BTreeMap<String, CheckpointEntry> = serde_json::from_str(json)?;
        if let Some(extra) = entries.keys().find(|k| !self.by_name.contains_key(*k)) {
            return Err(Error::Data(format!(
                "checkpoint has unknown parameter {extra}"
            )));
        }
        for (name, id) in &self.by_name {
            let entry = entries
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing parameter {name}")))?;
            let p = &mut self.params[id.0];
            if entry.shape != [p.value.rows(), p.value.cols()] {
                return Err(Error::Data(format!(
                    "parameter {name}: checkpoint shape {:?} vs model {:?}",
                    entry.shape,
                    p.value.shape()
                )));
            }
            if entry.frozen != p.frozen {
                return Err(Error::Data(format!(
                    "parameter {name}: frozen flag differs"
                )));
            }
            p.value = Tensor::new(entry.shape[0], entry.shape[1], entry.data.clone())?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.load_checkpoint_json(&json)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointEntry {
    shape: [usize; 2],
    frozen: bool,
    data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(1, 1), false).unwrap();
        assert!(s.add("a", Tensor::zeros(1, 1), false).is_err());
    }

    #[test]
    fn frozen_params_ignore_grad() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(1, 2), true).unwrap();
        s.add_grad(id, &Tensor::filled(1, 2, 1.0));
        assert_eq!(s.grad(id).sum(), 0.0);
    }

    #[test]
    fn read_counter_counts() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(1, 2), false).unwrap();
        let _ = s.read(id);
        let _ = s.read(id);
        assert_eq!(s.read_count(id), 2);
        s.reset_read_counts();
        assert_eq!(s.read_count(id), 0);
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(2, 2), false).unwrap();
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(1, 4), false).unwrap();
        assert!(b.load_checkpoint_json(&a.to_checkpoint_json()).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            values in prop::collection::vec(
                prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 1..24)
        ) {
            let mut a = ParamStore::new();
            a.add("x.w", Tensor::new(1, values.len(), values.clone()).unwrap(), false).unwrap();
            a.add("y.frozen", Tensor::filled(2, 1, -0.1), true).unwrap();
            let json = a.to_checkpoint_json();

            let mut b = ParamStore::new();
            b.add("x.w", Tensor::zeros(1, values.len()), false).unwrap();
            b.add("y.frozen", Tensor::zeros(2, 1), true).unwrap();
            b.load_checkpoint_json(&json).unwrap();
            let got = b.get(b.id("x.w").unwrap()).value.data();
            for (x, y) in values.iter().zip(got) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(b.to_checkpoint_json(), json);
        }
    }
}
