use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::Float;

/// One named parameter tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

/// Graph handles for every parameter of a [`ParamSet`], in order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: usize) -> Var {
        self.0[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    /// Registers a tensor and returns its id.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> usize {
        let grad = ArrayD::zeros(value.raw_dim());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        self.params.len() - 1
    }

    /// PyTorch-style `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value =
            ArrayD::from_shape_simple_fn(IxDyn(shape), || T::c(rng.random_range(-bound..bound)));
        self.add(name, value)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], c: f64) -> usize {
        self.add(name, ArrayD::from_elem(IxDyn(shape), T::c(c)))
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

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Binds every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| g.param(p.value.clone()))
                .collect(),
        )
    }

    /// Binds every tensor as a constant (no gradients flow into it).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| g.constant(p.value.clone()))
                .collect(),
        )
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Adds the gradients of `bound` into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients<T>, bound: &Bound) {
        for (p, v) in self.params.iter_mut().zip(bound.vars()) {
            if let Some(g) = grads.wrt(*v) {
                p.grad += g;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales gradients so that their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm.is_finite() && norm > max_norm {
            let s = T::c(max_norm / (norm + 1e-6));
            for p in &mut self.params {
                p.grad.mapv_inplace(|g| g * s);
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Squared L2 distance between two parameter sets of identical layout.
    pub fn distance_sq(&self, other: &ParamSet<T>) -> f64 {
        self.params
            .iter()
            .zip(other.params.iter())
            .flat_map(|(a, b)| a.value.iter().zip(b.value.iter()))
            .map(|(x, y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum()
    }

    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|v| U::c(v.as_f64())),
                    grad: p.grad.mapv(|v| U::c(v.as_f64())),
                })
                .collect(),
        }
    }
}
