use std::collections::HashMap;

use crate::autodiff::{BatchMoments, Tape, Var};
use crate::error::{GltError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics and other state that is saved but never optimized.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Named tensors owned by a model. Each entry has its own storage; layers
/// refer to entries by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        tensor.requires_grad = kind == ParamKind::Trainable;
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Param { name, tensor, kind });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds the tape gradients of every bound parameter leaf into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &[(ParamId, Var)]) {
        for &(id, v) in bound {
            if let Some(g) = tape.grad(v) {
                self.entries[id.0].tensor.accumulate_grad(g);
            }
        }
    }

    /// Blends observed batch moments into running statistics:
    /// `running ← (1 − momentum)·running + momentum·observed`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        for u in updates {
            let m = T::from_f64_lossy(u.momentum);
            let keep = T::one() - m;
            for (id, obs) in [(u.running_mean, &u.moments.mean), (u.running_var, &u.moments.var_unbiased)] {
                let t = &mut self.entries[id.0].tensor;
                t.data_mut().iter_mut().zip(obs).for_each(|(r, &o)| *r = keep * *r + m * o);
            }
        }
    }

    /// Returns the trainable names in store order.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    kind: p.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replaces every tensor with the one of the same name in `other`,
    /// requiring identical names, order and shapes.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(GltError::Format(format!(
                "architecture mismatch: {} tensors expected, found {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(GltError::Format(format!(
                    "architecture mismatch: expected {} {:?}, found {} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
            let rg = a.tensor.requires_grad;
            a.tensor = b.tensor.clone();
            a.tensor.requires_grad = rg;
            a.tensor.grad = None;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub moments: BatchMoments<T>,
}

/// One forward pass: a tape, read-only parameters, and the layer mode.
///
/// Parameters are copied onto the tape the first time a layer asks for
/// them. Batch-norm running statistics observed in training mode are
/// collected here and applied to the store by the caller afterwards, so the
/// store itself is never mutated during a forward pass.
pub struct Session<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    params: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, mode: Mode) -> Self {
        Session {
            tape,
            params,
            bound: vec![None; params.len()],
            mode,
            track_grads: mode == Mode::Train,
            bn_updates: Vec::new(),
        }
    }

    /// Uses pre-recorded tape variables for every parameter (in store order)
    /// instead of copying the store. Gradient checks perturb these.
    pub fn with_bound(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, vars: &[Var], mode: Mode) -> Self {
        assert_eq!(vars.len(), params.len(), "one variable per parameter");
        Session {
            tape,
            params,
            bound: vars.iter().map(|&v| Some(v)).collect(),
            mode,
            track_grads: mode == Mode::Train,
            bn_updates: Vec::new(),
        }
    }

    /// Whether trainable parameters are recorded as gradient-requiring leaves.
    pub fn set_track_grads(&mut self, on: bool) {
        self.track_grads = on;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let mut t = p.tensor.clone();
        t.grad = None;
        t.requires_grad = self.track_grads && p.kind == ParamKind::Trainable;
        let v = self.tape.leaf(t);
        self.bound[id.0] = Some(v);
        v
    }

    /// Current value of a parameter, read without recording it.
    pub fn param_value(&self, id: ParamId) -> &[T] {
        match self.bound[id.0] {
            Some(v) => self.tape.value(v),
            None => self.params.get(id).tensor.data(),
        }
    }

    pub fn record_bn_update(&mut self, update: BnUpdate<T>) {
        self.bn_updates.push(update);
    }

    /// Parameter leaves recorded so far, for [`ParamStore::accumulate_grads`].
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    pub fn finish(self) -> (Vec<(ParamId, Var)>, Vec<BnUpdate<T>>) {
        let bound = self.bound_params();
        (bound, self.bn_updates)
    }
}
