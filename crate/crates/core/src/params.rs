//! Named parameter storage and per-forward binding onto a tape.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimizer owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Weights,
    Architecture,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    group: ParamGroup,
    /// Row 0 is held at zero and never updated (padding embedding).
    frozen_first_row: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
            group,
            frozen_first_row: false,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Adds a table whose first row is zeroed and excluded from updates.
    pub fn add_padded_table(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        let c = value.cols();
        value.data_mut()[..c].iter_mut().for_each(|x| *x = 0.0);
        let id = self.add(name, value, ParamGroup::Weights);
        self.entries[id.0].frozen_first_row = true;
        id
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Replaces a value, keeping the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(crate::error::shape_err("ParamStore::set", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    pub fn adam_for(&self, group: ParamGroup, config: AdamConfig) -> AdamState {
        let ids = self.ids_in(group);
        let shapes: Vec<&[usize]> = ids.iter().map(|&id| self.get(id).shape()).collect();
        AdamState::new(config, &shapes)
    }

    /// One optimizer step over every parameter of `group`; other groups are untouched.
    pub fn apply_adam(&mut self, group: ParamGroup, adam: &mut AdamState, grads: &[Tensor]) -> Result<()> {
        let ids = self.ids_in(group);
        if grads.len() != self.len() {
            return Err(Error::Usage(format!(
                "apply_adam: {} gradients for {} parameters",
                grads.len(),
                self.len()
            )));
        }
        let mut masked: Vec<Tensor> = Vec::with_capacity(ids.len());
        for &id in &ids {
            let mut g = grads[id.0].clone();
            if self.entries[id.0].frozen_first_row {
                let c = g.cols();
                g.data_mut()[..c].iter_mut().for_each(|x| *x = 0.0);
            }
            masked.push(g);
        }
        let mut params: Vec<&mut Tensor> = self
            .entries
            .iter_mut()
            .filter(|e| e.group == group)
            .map(|e| &mut e.value)
            .collect();
        let grad_refs: Vec<&Tensor> = masked.iter().collect();
        adam.step(&mut params, &grad_refs)
    }

    /// Sum of element counts in a group.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.ids_in(group).iter().map(|&id| self.get(id).len()).sum()
    }
}

/// Whether a forward pass is for training (dropout active) or evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A tape plus the bindings of store parameters used in one forward pass.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, dropout_rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            dropout_rng,
        }
    }

    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, Mode::Eval, None)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// The tape variable for a parameter, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.tape.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: Scalar) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let n = self.tape.value(x).len();
        let rng = self
            .dropout_rng
            .as_deref_mut()
            .ok_or_else(|| Error::Usage("training-mode dropout needs an rng".into()))?;
        let keep = 1.0 / (1.0 - rate);
        let mult: Vec<Scalar> = (0..n).map(|_| if rng.gen::<Scalar>() < rate { 0.0 } else { keep }).collect();
        self.tape.dropout_with(x, Rc::new(mult))
    }

    /// Gradient for every store entry, in store order. Parameters that were not
    /// bound, or that did not reach the loss, get exact zeros.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Tensor>> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        Ok(self
            .store
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
            })
            .collect())
    }
}
