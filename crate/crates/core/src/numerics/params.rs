use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{contract, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub decay_exempt: bool,
}

/// Name fragments that mark a parameter as exempt from weight decay.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecayExemptions {
    pub patterns: Vec<String>,
}

impl Default for DecayExemptions {
    fn default() -> Self {
        DecayExemptions {
            patterns: vec!["bias".into(), "norm".into()],
        }
    }
}

impl DecayExemptions {
    pub fn is_exempt(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| name.contains(p.as_str()))
    }
}

/// Owns every trainable tensor of a model together with its gradient.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    exemptions: DecayExemptions,
}

impl ParamStore {
    pub fn new(exemptions: DecayExemptions) -> Self {
        ParamStore {
            params: Vec::new(),
            exemptions,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let decay_exempt = self.exemptions.is_exempt(&name);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            decay_exempt,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds a backward pass's gradients onto the stored ones.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        contract!(
            grads.slots.len() <= self.params.len(),
            "gradient set has {} slots but store has {} parameters",
            grads.slots.len(),
            self.params.len()
        );
        for (param, slot) in self.params.iter_mut().zip(&grads.slots) {
            if let Some(g) = slot {
                contract!(
                    g.shape() == param.value.shape(),
                    "gradient shape {:?} does not match parameter {} {:?}",
                    g.shape(),
                    param.name,
                    param.value.shape()
                );
                param.grad.add_assign(g);
            }
        }
        Ok(())
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn with_len(n: usize) -> Self {
        Gradients {
            slots: vec![None; n],
        }
    }

    /// Gradient of `id`, or `None` if the loss does not depend on it.
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn add(&mut self, id: ParamId, grad: Tensor) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }
}
