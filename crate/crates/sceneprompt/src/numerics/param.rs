//! Named trainable parameters and their tape bindings.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;
use crate::numerics::tape::{Tape, Tensor};

/// One learnable weight with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: DenseArray,
    pub grad: DenseArray,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: DenseArray) -> Self {
        let grad = DenseArray::zeros(value.shape().to_vec());
        Parameter {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: DenseArray) -> Self {
        let mut p = Parameter::new(name, value);
        p.trainable = false;
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Insertion-ordered collection of parameters. Iteration order is part
/// of the reproducibility contract, so the backing store is a `Vec`.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<()> {
        if self.index.contains_key(&param.name) {
            return Err(Error::Construction(format!(
                "duplicate parameter name '{}'",
                param.name
            )));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::State(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::State(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.zero_grad();
        }
    }

    /// Total element count across trainable parameters.
    pub fn trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// One forward/backward pass: leases parameters onto a fresh tape and
/// harvests leaf gradients back into the `ParamSet` afterwards.
///
/// Leases are memoized, so a parameter used in several places shares a
/// single leaf and its adjoints accumulate correctly.
pub struct Session {
    pub tape: Tape,
    leased: Vec<(String, Tensor)>,
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Session {
    pub fn new() -> Self {
        Session {
            tape: Tape::new(),
            leased: Vec::new(),
        }
    }

    /// Leaf tensor for a named parameter (memoized per session).
    pub fn lease(&mut self, params: &ParamSet, name: &str) -> Result<Tensor> {
        if let Some((_, t)) = self.leased.iter().find(|(n, _)| n == name) {
            return Ok(t.clone());
        }
        let p = params.get(name)?;
        let t = self.tape.leaf(p.value.clone());
        self.leased.push((name.to_string(), t.clone()));
        Ok(t)
    }

    pub fn constant(&self, value: DenseArray) -> Tensor {
        self.tape.constant(value)
    }

    /// Accumulate tape-leaf gradients into `param.grad`. Call after
    /// `loss.backward()`.
    pub fn harvest_grads(&self, params: &mut ParamSet) -> Result<()> {
        for (name, tensor) in &self.leased {
            if let Some(g) = tensor.grad() {
                params.get_mut(name)?.grad.add_assign(&g)?;
            }
        }
        Ok(())
    }
}
