//! Named parameter storage.
//!
//! A [`Param`] owns its value and hands out graph leaves on demand. The
//! leaf is cached until the next [`ParamStore::begin_step`], so every use
//! of a parameter inside one loss graph shares a single node and gradient
//! contributions accumulate. Frozen parameters hand out constants, which
//! prunes their subgraphs from backward entirely.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use sha2::{Digest, Sha256};

use crate::tensor::{Arr, Grads, Tensor};

pub struct Param {
    name: String,
    value: RefCell<Arr>,
    trainable: Cell<bool>,
    leaf: RefCell<Option<Tensor>>,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn trainable(&self) -> bool {
        self.trainable.get()
    }

    pub fn set_trainable(&self, t: bool) {
        self.trainable.set(t);
        *self.leaf.borrow_mut() = None;
    }

    pub fn value(&self) -> Arr {
        self.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value.borrow().len()
    }

    pub fn set_value(&self, v: Arr) {
        assert_eq!(
            v.shape(),
            self.value.borrow().shape(),
            "param {} shape change",
            self.name
        );
        *self.value.borrow_mut() = v;
        *self.leaf.borrow_mut() = None;
    }

    /// In-place update used by optimizers. Invalidates the cached leaf.
    pub fn update(&self, f: impl FnOnce(&mut Arr)) {
        f(&mut self.value.borrow_mut());
        *self.leaf.borrow_mut() = None;
    }

    /// Graph leaf for the current step (cached until `begin_step`).
    pub fn tensor(&self) -> Tensor {
        let mut slot = self.leaf.borrow_mut();
        if let Some(t) = slot.as_ref() {
            return t.clone();
        }
        let t = if self.trainable.get() {
            Tensor::leaf(self.value.borrow().clone())
        } else {
            Tensor::constant(self.value.borrow().clone())
        };
        *slot = Some(t.clone());
        t
    }

    /// Gradient for this param out of a backward result, if any.
    pub fn grad<'g>(&self, grads: &'g Grads) -> Option<&'g Arr> {
        let slot = self.leaf.borrow();
        slot.as_ref().and_then(|t| grads.get(t))
    }
}

/// Insertion-ordered collection of parameters with unique names.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Rc<Param>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Arr) -> Rc<Param> {
        assert!(
            !self.index.contains_key(name),
            "duplicate param name: {name}"
        );
        let p = Rc::new(Param {
            name: name.to_string(),
            value: RefCell::new(value),
            trainable: Cell::new(true),
            leaf: RefCell::new(None),
        });
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(p.clone());
        p
    }

    pub fn get(&self, name: &str) -> Option<Rc<Param>> {
        self.index.get(name).map(|&i| self.params[i].clone())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rc<Param>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Drop all cached leaves so the next graph gets fresh ones.
    pub fn begin_step(&self) {
        for p in &self.params {
            *p.leaf.borrow_mut() = None;
        }
    }

    pub fn trainable(&self) -> Vec<Rc<Param>> {
        self.params.iter().filter(|p| p.trainable()).cloned().collect()
    }

    pub fn set_all_trainable(&self, t: bool) {
        for p in &self.params {
            p.set_trainable(t);
        }
    }

    pub fn set_trainable_prefix(&self, prefix: &str, t: bool) {
        for p in &self.params {
            if p.name.starts_with(prefix) {
                p.set_trainable(t);
            }
        }
    }

    /// SHA-256 over (name, shape, little-endian f64 payload) in name order.
    /// Identical checksums mean identical parameter sets.
    pub fn checksum(&self) -> String {
        let mut names: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        let mut h = Sha256::new();
        for name in names {
            let p = &self.params[self.index[name]];
            h.update(name.as_bytes());
            h.update([0u8]);
            let v = p.value.borrow();
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn state(&self) -> Vec<(String, Arr)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.borrow().clone()))
            .collect()
    }

    /// Load values by name. Every stored param must be present; extras error.
    pub fn load_state(&self, state: &[(String, Arr)]) -> crate::Result<()> {
        let mut seen = 0usize;
        for (name, v) in state {
            match self.index.get(name) {
                Some(&i) => {
                    let p = &self.params[i];
                    if p.value.borrow().shape() != v.shape() {
                        return Err(crate::Error::Checkpoint(format!(
                            "param {name}: shape {:?} in file, {:?} in model",
                            v.shape(),
                            p.value.borrow().shape()
                        )));
                    }
                    p.set_value(v.clone());
                    seen += 1;
                }
                None => {
                    return Err(crate::Error::Checkpoint(format!(
                        "param {name} not present in model"
                    )))
                }
            }
        }
        if seen != self.params.len() {
            let missing: Vec<&str> = self
                .params
                .iter()
                .filter(|p| !state.iter().any(|(n, _)| n == &p.name))
                .map(|p| p.name.as_str())
                .collect();
            return Err(crate::Error::Checkpoint(format!(
                "missing params in file: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
