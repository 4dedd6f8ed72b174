use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Named trainable tensor.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered collection of parameters. Order is registration order and is
/// what checkpoints and optimizer state follow.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.params[self.position(name)?].value)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn set(&mut self, id: usize, value: Tensor<T>) -> Result<()> {
        let old = &self.params[id];
        if old.value.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "ParamStore::set",
                detail: format!(
                    "`{}` is {:?}, got {:?}",
                    old.name,
                    old.value.shape(),
                    value.shape()
                ),
            });
        }
        self.params[id].value = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Exact equality of names, shapes and bits.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits_u64() == y.to_bits_u64())
            })
    }
}

trait Bits {
    fn to_bits_u64(self) -> u64;
}

impl<T: Real> Bits for T {
    fn to_bits_u64(self) -> u64 {
        self.f64().to_bits()
    }
}

/// Fan-in scaled normal init for a weight whose first axis is the output.
pub fn kaiming_normal<T: Real, R: Rng>(shape: impl Into<Shape>, rng: &mut R) -> Tensor<T> {
    let shape = shape.into();
    let fan_in: usize = shape.dims()[1..].iter().product::<usize>().max(1);
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::c(z * std)
    })
}

/// Parameters placed on a tape, addressable by name.
pub struct Bound<'s, T> {
    store: &'s ParamStore<T>,
    vars: Vec<Var>,
}

impl<'s, T: Real> Bound<'s, T> {
    /// Adds every parameter as a leaf.
    pub fn new(tape: &Tape<T>, store: &'s ParamStore<T>, requires_grad: bool) -> Self {
        let vars = store
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect();
        Bound { store, vars }
    }

    /// Reuses leaves that were already created, in store order.
    pub fn from_vars(store: &'s ParamStore<T>, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(TensorError::Shape {
                op: "Bound::from_vars",
                detail: format!("{} vars for {} parameters", vars.len(), store.len()),
            });
        }
        Ok(Bound { store, vars })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        Ok(self.vars[self.store.position(name)?])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }
}
