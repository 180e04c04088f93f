//! Named parameter storage and the linear/MLP building blocks.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Flat, ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
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

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Replaces every tensor, keeping names. Shapes must match.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor<S>>) {
        assert_eq!(tensors.len(), self.tensors.len());
        for (old, new) in self.tensors.iter().zip(&tensors) {
            assert_eq!(old.shape(), new.shape());
        }
        self.tensors = tensors;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±√(6/(fan_in+fan_out))`.
    Xavier,
    /// Xavier scaled by the given factor.
    Scaled(f64),
    /// Uniform in `±bound`.
    Uniform(f64),
    Zero,
}

pub fn init_tensor<S: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, init: Init) -> Tensor<S> {
    let bound = libm::sqrt(6.0 / (rows + cols) as f64);
    let bound = match init {
        Init::Xavier => bound,
        Init::Scaled(s) => s * bound,
        Init::Uniform(b) => b,
        Init::Zero => return Tensor::zeros(&[rows, cols]),
    };
    let data = (0..rows * cols).map(|_| S::of(rng.random_range(-bound..=bound))).collect();
    Tensor::from_parts(alloc::vec![rows, cols], data)
}

/// `y = x·W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Self {
        let weight = store.add(name.to_string() + ".weight", init_tensor(rng, in_dim, out_dim, init));
        let bias = store.add(name.to_string() + ".bias", Tensor::zeros(&[1, out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<'_, S>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.affine(x, w, b)
    }

    /// Evaluates the layer without recording.
    pub fn apply<S: Real>(&self, params: &[Tensor<S>], x: &Tensor<S>) -> Tensor<S> {
        let mut y = crate::tensor::matmul(x, &params[self.weight]);
        let b = params[self.bias].data();
        let c = self.out_dim;
        for row in y.data_mut().chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Two linear layers with a GELU between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: [usize; 3],
        last_init: Init,
    ) -> Self {
        let first = Linear::new(store, rng, &(name.to_string() + ".0"), dims[0], dims[1], Init::Xavier);
        let second = Linear::new(store, rng, &(name.to_string() + ".1"), dims[1], dims[2], last_init);
        Self { first, second }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<'_, S>, x: Var) -> Var {
        let h = self.first.forward(tape, x);
        let h = tape.gelu(h);
        self.second.forward(tape, h)
    }

    pub fn apply<S: Real>(&self, params: &[Tensor<S>], x: &Tensor<S>) -> Tensor<S> {
        let h = self.first.apply(params, x).map(crate::tensor::gelu);
        self.second.apply(params, &h)
    }

    pub fn param_count(&self) -> usize {
        self.first.param_count() + self.second.param_count()
    }
}
