use std::cell::RefCell;

use super::Tensor;
use crate::scalar::Scalar;

/// Named trainable leaf. The optimizer swaps the value between steps; any
/// graph built earlier keeps referencing the leaf it was built with.
pub struct Parameter<T: Scalar> {
    name: String,
    value: RefCell<Tensor<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> Self {
        Parameter {
            name: name.into(),
            value: RefCell::new(Tensor::var(data, shape)),
        }
    }

    pub fn from_f64(name: impl Into<String>, data: &[f64], shape: &[usize]) -> Self {
        Parameter::new(
            name,
            data.iter().map(|&v| T::from_f64(v)).collect(),
            shape,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Current leaf tensor for use in a forward pass.
    pub fn tensor(&self) -> Tensor<T> {
        self.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value.borrow().numel()
    }

    pub fn data(&self) -> Vec<T> {
        self.value.borrow().data().to_vec()
    }

    /// Replace the value with a fresh leaf (gradient slate wiped).
    pub fn set_data(&self, data: Vec<T>) {
        let shape = self.shape();
        *self.value.borrow_mut() = Tensor::var(data, &shape);
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.value.borrow().grad()
    }

    pub fn zero_grad(&self) {
        self.value.borrow().zero_grad();
    }
}

impl<T: Scalar> std::fmt::Debug for Parameter<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.name)
            .field("shape", &self.shape())
            .finish()
    }
}
