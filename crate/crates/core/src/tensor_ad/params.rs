use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::{Gradients, Tape, Tensor, TensorError, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    decay: Vec<bool>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Matrices are weight-decayed, vectors and scalars
    /// (biases, norm gains, temperature) are not.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.decay.push(tensor.rank() >= 2);
        self.names.push(name);
        self.tensors.push(Arc::new(tensor));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.tensors[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter().map(|t| &**t))
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Replaces values from `(name, tensor)` pairs. Every parameter must be
    /// present with its exact shape; extra entries are ignored.
    pub fn load_named<'a>(
        &mut self,
        named: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<(), TensorError> {
        let mut seen = vec![false; self.len()];
        for (name, tensor) in named {
            let Some(&i) = self.by_name.get(name) else {
                continue;
            };
            if self.tensors[i].shape() != tensor.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_named",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: tensor.shape().to_vec(),
                });
            }
            self.tensors[i] = Arc::new(tensor.clone());
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(TensorError::MissingParameter(self.names[i].clone()));
        }
        Ok(())
    }

    /// Binds parameters onto a tape. With `trainable`, leaves accept
    /// gradient; otherwise they are constants. Leaves are created lazily on
    /// first access so a forward pass only records what it uses.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape, trainable: bool) -> Binding<'s, 't> {
        Binding {
            store: self,
            tape,
            trainable,
            vars: RefCell::new(vec![None; self.len()]),
        }
    }
}

/// Parameters of a [`ParamStore`] as leaves of one tape.
pub struct Binding<'s, 't> {
    store: &'s ParamStore,
    tape: &'t Tape,
    trainable: bool,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'s, 't> Binding<'s, 't> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let shared = self.store.get_shared(id);
        let v = if self.trainable {
            self.tape.var_shared(shared)
        } else {
            self.tape.constant_shared(shared)
        };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// One gradient per parameter, zeros for those the loss never touched.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        let vars = self.vars.borrow();
        self.store
            .ids()
            .map(|id| match vars[id.0] {
                Some(v) => grads.get_or_zeros(v),
                None => Tensor::zeros(self.store.get(id).shape()),
            })
            .collect()
    }
}
