//! Named parameter storage and per-pass tape bindings.

use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors; the order is the registration order
/// and is stable across runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Xavier-uniform `rows × cols` weight matrix.
    pub fn add_xavier<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = libm::sqrt(6.0 / (rows + cols) as f64);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let t = Tensor::new(rows, cols, data).expect("positive dims");
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::ones(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor with the same-named tensor from `other`. Names
    /// and shapes must match exactly.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(alloc::format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::Config(alloc::format!("checkpoint is missing tensor {name}")))?;
            if src.shape() != self.values[i].shape() {
                return Err(Error::Config(alloc::format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

/// Lazily places parameters on a tape, once each.
pub struct Binding<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: bool,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Binding<'t, 's> {
    /// Parameters become gradient-tracking leaves.
    pub fn trainable(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self::new(tape, store, true)
    }

    /// Parameters become constants; nothing is recorded for backward.
    pub fn frozen(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self::new(tape, store, false)
    }

    fn new(tape: &'t Tape, store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            vars: RefCell::new(alloc::vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| self.tape.leaf(self.store.get(id).clone(), self.trainable))
    }

    /// Per-parameter gradients, `None` for parameters never used on this tape.
    pub fn collect(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}
