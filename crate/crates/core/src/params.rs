//! Named parameter tensors shared by every learnable component.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, Real, Tensor, Var};

/// Ordered access to a component's learnable tensors. `bind` must create
/// graph leaves in the same order `named` lists them.
pub trait Parameters<T: Real> {
    fn named(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn bind_all(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.named()
            .into_iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                t.take_grad();
                g.param(t)
            })
            .collect()
    }

    /// Adds the gradients stored on `vars` (from `bind_all`) into the tensors.
    fn accumulate_grads(&mut self, g: &Graph<T>, vars: &[Var]) {
        for ((_, t), v) in self.named_mut().into_iter().zip(vars) {
            if let Some(grad) = g.grad(*v) {
                t.accumulate_grad(grad);
            }
        }
    }

    fn zero_grads(&mut self) {
        for (_, t) in self.named_mut() {
            t.zero_grad();
        }
    }

    fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// Fan-in scaled normal initialisation, σ = sqrt(2 / fan_in).
pub fn kaiming<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

pub(crate) fn prefixed<'a, T>(
    prefix: &str,
    items: Vec<(&'static str, &'a Tensor<T>)>,
) -> Vec<(String, &'a Tensor<T>)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub(crate) fn prefixed_mut<'a, T>(
    prefix: &str,
    items: Vec<(&'static str, &'a mut Tensor<T>)>,
) -> Vec<(String, &'a mut Tensor<T>)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Linear layer `in → out` with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: kaiming(&[fan_in, fan_out], fan_in, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn items(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub(crate) fn items_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// Graph handles for a bound [`Linear`].
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> crate::Result<Var> {
        g.fully_connected(x, self.weight, Some(self.bias))
    }
}

impl<T: Real> Parameters<T> for Linear<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.items().into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.items_mut()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect()
    }
}

impl<T: Real> Linear<T> {
    pub fn bind(&self, g: &mut Graph<T>) -> LinearVars {
        let v = self.bind_all(g);
        LinearVars {
            weight: v[0],
            bias: v[1],
        }
    }
}
