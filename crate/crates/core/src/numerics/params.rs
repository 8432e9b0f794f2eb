use super::tape::Gradients;
use super::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

/// Named parameters in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for p in &mut self.params {
            p.requires_grad = flag;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grads` into the gradient buffers of parameters with
    /// `requires_grad`; repeated calls accumulate.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            if let Some(g) = grads.param(ParamId(i)) {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(g),
                    None => p.grad = Some(g.clone()),
                }
            }
        }
    }

    /// Adds `grad` into one parameter's buffer (ignored when frozen).
    pub fn add_grad(&mut self, id: ParamId, grad: &Tensor) {
        let p = &mut self.params[id.0];
        if !p.requires_grad {
            return;
        }
        match &mut p.grad {
            Some(acc) => acc.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
    }
}
