use super::params::{ParamId, ParamStore};
use crate::numerics::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

impl BnUpdate {
    /// running ← (1 − momentum)·running + momentum·batch
    pub fn apply(&self, store: &mut ParamStore) {
        for (id, batch) in [(self.mean, &self.batch_mean), (self.var, &self.batch_var)] {
            for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - self.momentum) * *r + self.momentum * b;
            }
        }
    }
}

#[derive(Debug)]
pub enum Mode {
    Eval,
    Train { dropout: ChaCha8Rng },
}

/// One forward pass: a tape plus the parameter bindings and mode.
///
/// Parameters are bound lazily; a parameter that the pass never touches is
/// not recorded and receives no gradient.
pub struct Graph<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Graph<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            vars: vec![None; store.len()],
            mode,
            bn_updates: Vec::new(),
        }
    }

    /// Uses pre-recorded tape variables for some parameters (gradient checks
    /// bind perturbed copies this way).
    pub fn with_bound(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode, bound: Vec<Option<Var>>) -> Self {
        assert_eq!(bound.len(), store.len());
        Self {
            tape,
            store,
            vars: bound,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn mode_mut(&mut self) -> &mut Mode {
        &mut self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let entry = &self.store.entries()[id.0];
        let v = if entry.trainable {
            self.tape.param(entry.tensor.clone())
        } else {
            self.tape.constant(entry.tensor.clone())
        };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub(crate) fn push_bn_update(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    /// Consumes the graph, returning the parameter bindings and pending
    /// batch-norm updates.
    pub fn finish(self) -> (Vec<Option<Var>>, Vec<BnUpdate>) {
        (self.vars, self.bn_updates)
    }
}

/// Gradients per store entry after `tape.backward`; `None` for untouched or
/// non-trainable entries.
pub fn collect_grads(tape: &Tape, bindings: &[Option<Var>]) -> Vec<Option<Vec<f64>>> {
    bindings
        .iter()
        .map(|b| b.and_then(|v| tape.grad(v).map(<[f64]>::to_vec)))
        .collect()
}
