use ndarray::{Array1, ArrayD, IxDyn};

use super::Real;

/// A trainable array together with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Real> Param<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            value: ArrayD::zeros(IxDyn(shape)),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Self {
            value: ArrayD::from_elem(IxDyn(shape), v),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Named traversal over trainable parameters and non-trainable buffers.
///
/// Visit order is fixed by construction, which keeps optimizer updates and
/// checkpoint layouts deterministic.
pub trait Parameterized<F: Real> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Array1<F>)) {}

    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Array1<F>)) {}

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
