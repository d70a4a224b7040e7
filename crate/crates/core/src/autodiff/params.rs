use std::collections::HashMap;

use super::{Graph, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters enter graphs as constants.
    pub frozen: bool,
}

/// Named, ordered parameter collection. Insertion order is the iteration and
/// serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            frozen: false,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.grad = None;
        }
    }

    /// Adds the gradients recorded on `graph` into the stored parameter gradients.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        let mut pairs: Vec<_> = graph.param_nodes().collect();
        pairs.sort();
        for (pid, node) in pairs {
            let Some(g) = graph.grad(node) else { continue };
            let p = &mut self.params[pid.0];
            let len = p.value.len();
            let acc = p.value.grad.get_or_insert_with(|| vec![0.0; len]);
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    /// Gradient of a parameter, zeros if it never received one.
    pub fn grad_or_zero(&self, id: ParamId) -> Vec<f64> {
        let p = &self.params[id.0];
        p.value.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.len()])
    }
}
