//! Named parameter tensors partitioned into freezing groups.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use fsaug_autograd::{Gradients, Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::{normal_vec, substream};

/// Parameter group; fine-tuning masks are expressed as sets of groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    Linear,
    Embed,
    Head,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Linear => "linear",
            Group::Embed => "embed",
            Group::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "backbone" => Group::Backbone,
            "linear" => Group::Linear,
            "embed" => Group::Embed,
            "head" => Group::Head,
            other => return Err(Error::Argument(format!("unknown parameter group {other:?}"))),
        })
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Arc<Tensor<T>>,
}

/// Ordered parameter collection with name lookup.
///
/// Values are reference counted so a forward graph can borrow them without
/// copying; updates go through [`ParamStore::value_mut`], which only copies
/// when a graph still holds a reference.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group, value: Arc::new(value) });
    }

    /// Gaussian-initialized tensor `N(0, std^2)` drawn from `(seed, name)`.
    pub fn insert_normal(&mut self, name: &str, group: Group, shape: &[usize], std: f64, seed: u64) {
        let n = shape.iter().product();
        let data = normal_vec(&mut substream(seed, name), n, std).into_iter().map(T::lit).collect();
        self.insert(name, group, Tensor::new(shape, data));
    }

    pub fn insert_zeros(&mut self, name: &str, group: Group, shape: &[usize]) {
        self.insert(name, group, Tensor::zeros(shape));
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> &Param<T> {
        &self.params[self.index[name]]
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.param(name).value.as_ref()
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = self.index[name];
        Arc::make_mut(&mut self.params[i].value)
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))?;
        ensure!(
            self.params[i].value.shape() == value.shape(),
            Argument,
            "shape mismatch for {name}: {:?} vs {:?}",
            self.params[i].value.shape(),
            value.shape()
        );
        self.params[i].value = Arc::new(value);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Creates one leaf per parameter; those for which `trainable` holds
    /// receive gradients, the rest are constants.
    pub fn bind<'g, 's>(&'s self, graph: &'g Graph<T>, trainable: impl Fn(&Param<T>) -> bool) -> Bound<'g, 's, T> {
        let vars = self.params.iter().map(|p| graph.leaf(p.value.clone(), trainable(p))).collect();
        Bound { store: self, vars }
    }

    pub fn bind_constant<'g, 's>(&'s self, graph: &'g Graph<T>) -> Bound<'g, 's, T> {
        self.bind(graph, |_| false)
    }

    /// Names and shapes, used to check structural compatibility.
    pub fn signature(&self) -> Vec<(String, Group, Vec<usize>)> {
        self.params.iter().map(|p| (p.name.clone(), p.group, p.value.shape().to_vec())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.group, p.value.cast());
        }
        out
    }
}

/// Parameters of one store bound into a graph.
pub struct Bound<'g, 's, T: Scalar> {
    store: &'s ParamStore<T>,
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Scalar> Bound<'g, '_, T> {
    pub fn var(&self, name: &str) -> Var<'g, T> {
        match self.store.position(name) {
            Some(i) => self.vars[i],
            None => panic!("parameter {name} is not part of this store"),
        }
    }

    /// Gradients for the trainable parameters, by name.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<(String, Tensor<T>)> {
        self.store
            .iter()
            .zip(&self.vars)
            .filter(|(_, v)| v.requires_grad())
            .map(|(p, v)| {
                let g = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (p.name.clone(), g)
            })
            .collect()
    }
}
