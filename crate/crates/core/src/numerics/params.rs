use std::cell::RefCell;

use crate::error::{Error, Result};

use super::{Float, Gradients, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef(pub usize);

/// Ordered, named parameter tensors owned by one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Float = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamRef {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamRef(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, p: ParamRef) -> &Tensor<T> {
        &self.tensors[p.0]
    }

    pub fn get_mut(&mut self, p: ParamRef) -> &mut Tensor<T> {
        &mut self.tensors[p.0]
    }

    pub fn name(&self, p: ParamRef) -> &str {
        &self.names[p.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// The first `n` parameters as a new store.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            names: self.names[..n].to_vec(),
            tensors: self.tensors[..n].to_vec(),
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn has_any_grad(&self) -> bool {
        self.tensors.iter().any(|t| t.grad().is_some())
    }

    /// Adds the gradients recorded for each bound parameter into its buffer.
    pub fn accumulate_grads(&mut self, bindings: &Bindings, grads: &Gradients<T>) -> Result<()> {
        if bindings.slots.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "bindings for {} params applied to a store of {}",
                bindings.slots.len(),
                self.tensors.len()
            )));
        }
        for (tensor, slot) in self.tensors.iter_mut().zip(&bindings.slots) {
            if let Some(g) = slot.and_then(|id| grads.get_id(id)) {
                tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Flat copy of every value, for checksums and comparisons.
    pub fn flat_values(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Lazily records the parameters of one store on a tape.
///
/// A trainable binder records each parameter at most once as a
/// gradient-bearing leaf; a frozen binder records them as constants.
pub struct Binder<'t, 's, T: Float = f32> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    trainable: bool,
    slots: RefCell<Vec<Option<usize>>>,
}

/// Parameter-index to tape-node mapping left behind by a [`Binder`].
#[derive(Debug, Clone)]
pub struct Bindings {
    slots: Vec<Option<usize>>,
}

impl<'t, 's, T: Float> Binder<'t, 's, T> {
    pub fn trainable(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::with_mode(tape, store, true)
    }

    pub fn frozen(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::with_mode(tape, store, false)
    }

    fn with_mode(tape: &'t Tape<T>, store: &'s ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            slots: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn param(&self, p: ParamRef) -> Var<'t, T> {
        let mut slots = self.slots.borrow_mut();
        if let Some(id) = slots[p.0] {
            return self.tape.handle(id);
        }
        let mut t = self.store.get(p).clone();
        t.zero_grad();
        let v = if self.trainable {
            self.tape.leaf(t.with_grad())
        } else {
            self.tape.constant(t)
        };
        slots[p.0] = Some(v.id());
        v
    }

    pub fn into_bindings(self) -> Bindings {
        Bindings {
            slots: self.slots.into_inner(),
        }
    }
}
