use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Gradients, Graph, Tensor, Var};
use crate::{Error, Real, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    /// Dotted path, e.g. `block.2.attn.beta`.
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Registry of named parameters. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: BTreeMap<String, usize>,
}

/// Graph handles for every parameter of a store, from [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Per-parameter gradients, indexed like the store. Frozen parameters have none.
pub type ParamGrads<T> = Vec<Option<Vec<T>>>;

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(alloc::format!(
                "parameter `{name}` registered twice"
            )));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            trainable: true,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.id(name).map(move |id| self.get_mut(id))
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Marks each parameter trainable iff `keep(name)` holds.
    pub fn set_trainable(&mut self, keep: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = keep(&p.name);
        }
    }

    /// Puts every parameter on the graph, trainable ones as gradient leaves.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.param(&p.tensor)
                } else {
                    g.constant_ref(&p.tensor)
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> ParamGrads<T> {
        bound.vars.iter().map(|&v| grads.take(v)).collect()
    }

    /// Copies values from `other` for every name present in both stores.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &other.params {
            let dst = self
                .by_name_mut(&p.name)
                .ok_or_else(|| Error::UnknownParameter(p.name.clone()))?;
            if dst.tensor.shape() != p.tensor.shape() {
                return Err(Error::shape("load", dst.tensor.shape(), p.tensor.shape()));
            }
            dst.tensor = p.tensor.clone();
        }
        Ok(())
    }
}
