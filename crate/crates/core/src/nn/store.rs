use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Named tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// # Panics
    /// If `name` is already registered.
    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            self.find(name).is_none(),
            "parameter {name} registered twice"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replaces a value, keeping the shape.
    pub fn set(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if data.len() != e.value.numel() {
            bail!(
                Size,
                "{}: expected {} values, got {}",
                e.name,
                e.value.numel(),
                data.len()
            );
        }
        e.value.data_mut().copy_from_slice(&data);
        Ok(())
    }
}

/// One forward pass: a tape plus lazily bound store entries.
///
/// Trainable entries enter the tape as differentiable leaves, buffers as
/// constants. Training-mode batch norm queues running-statistic updates that
/// [`Forward::commit`] writes back.
pub struct Forward<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    training: bool,
    updates: Vec<(ParamId, Vec<f64>)>,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s ParamStore, training: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            vars: vec![None; store.len()],
            training,
            updates: Vec::new(),
        }
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(tape: Tape, store: &'s ParamStore, training: bool) -> Self {
        Self {
            tape,
            ..Self::new(store, training)
        }
    }

    /// Uses `v` in place of the stored value of `id` for the rest of the pass.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = Some(v);
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = if e.trainable {
            self.tape.param(&e.value)
        } else {
            self.tape.constant(e.value.clone())
        };
        self.vars[id.0] = Some(v);
        v
    }

    pub(crate) fn queue_update(&mut self, id: ParamId, data: Vec<f64>) {
        self.updates.push((id, data));
    }

    /// Gradients of `loss` per store entry; zeros for trainable entries the
    /// loss did not reach, `None` for buffers.
    pub fn gradients(&self, loss: Var) -> Result<ParamGrads> {
        let grads: Gradients = self.tape.backward(loss)?;
        let per = self
            .store
            .entries
            .iter()
            .zip(&self.vars)
            .map(|(e, v)| {
                e.trainable.then(|| {
                    v.and_then(|v| grads.wrt(v).cloned())
                        .unwrap_or_else(|| Tensor::zeros(e.value.shape()).expect("valid shape"))
                })
            })
            .collect();
        Ok(ParamGrads(per))
    }

    /// Pending buffer updates, in the order they were produced.
    pub fn into_updates(self) -> Vec<(ParamId, Vec<f64>)> {
        self.updates
    }

    pub fn commit(updates: Vec<(ParamId, Vec<f64>)>, store: &mut ParamStore) -> Result<()> {
        for (id, data) in updates {
            store.set(id, data)?;
        }
        Ok(())
    }
}

/// Gradient per store entry (`None` for buffers).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Option<Tensor>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(Option::as_ref)
    }

    /// Sums another gradient set into this one.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(Tensor::all_finite)
    }
}
