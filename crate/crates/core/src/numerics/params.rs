//! Named parameter storage and per-tape binding.

use super::{NumericsError, Result, Rng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(trainable);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<T>) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "ParamStore::set",
                lhs: self.tensors[id.0].shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.ids().filter(|&i| self.is_trainable(i)).map(|i| self.get(i).len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            trainable: self.trainable.clone(),
        }
    }

    /// Adds `N(0, std²)` noise to every trainable tensor (used to move
    /// zero-initialized layers off their trivial point for gradient checks).
    pub fn perturb(&mut self, std: f64, rng: &mut Rng) {
        for i in 0..self.tensors.len() {
            if self.trainable[i] {
                let t = &self.tensors[i];
                let data: Vec<f64> = t.to_f64_vec().iter().map(|v| v + std * rng.normal()).collect();
                self.tensors[i] = Tensor::from_f64(t.shape(), &data).expect("finite perturbation");
            }
        }
    }

    /// Trainable parameters flattened in id order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        self.ids()
            .filter(|&i| self.is_trainable(i))
            .flat_map(|i| self.get(i).to_f64_vec())
            .collect()
    }

    /// Inverse of [`ParamStore::flatten_trainable`].
    pub fn load_trainable(&mut self, flat: &[f64]) -> Result<()> {
        let mut off = 0;
        for i in 0..self.tensors.len() {
            if !self.trainable[i] {
                continue;
            }
            let n = self.tensors[i].len();
            let shape = self.tensors[i].shape().to_vec();
            self.tensors[i] = Tensor::from_f64(&shape, &flat[off..off + n])?;
            off += n;
        }
        Ok(())
    }
}

/// Lazily puts parameters on a tape, at most once each.
pub struct Binder<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Binder { store, bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn get(&mut self, tape: &mut Tape<T>, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.store.is_trainable(id) { tape.param(id.0, t) } else { tape.constant(t) };
        self.bound[id.0] = Some(v);
        v
    }
}
