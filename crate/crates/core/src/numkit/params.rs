use super::optim::clip_global_norm;
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape`, tracked for gradients when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| if trainable { tape.param(t) } else { tape.constant(t.without_grad()) }).collect()
    }

    /// Adds `scale ·` the gradients of `bound` into each tensor's accumulator.
    pub fn accumulate(&mut self, bound: &[Var], grads: &Gradients, scale: f64) {
        for (t, v) in self.tensors.iter_mut().zip(bound) {
            if let Some(g) = grads.get(*v) {
                let acc = t.grad_mut();
                acc.iter_mut().zip(g).for_each(|(a, x)| *a += scale * x);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        clip_global_norm(self.tensors.iter_mut().map(|t| t.grad_mut().as_mut_slice()), max_norm)
    }

    /// True when names, shapes and every value agree bit for bit.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bitwise_eq(b))
    }

    /// `self ← decay·self + (1−decay)·src`, used for EMA shadows.
    pub fn ema_update(&mut self, src: &ParamStore, decay: f64) {
        for (dst, s) in self.tensors.iter_mut().zip(&src.tensors) {
            for (d, v) in dst.data_mut().iter_mut().zip(s.data()) {
                *d = decay * *d + (1.0 - decay) * v;
            }
        }
    }

    pub fn without_grads(&self) -> Self {
        Self { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::without_grad).collect() }
    }
}
