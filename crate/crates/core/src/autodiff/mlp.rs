//! Multi-layer perceptrons with softplus activations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A collection of weight tensors with a fixed traversal order.
///
/// `tensors()` and `tensors_mut()` must visit the same tensors in the same
/// order; bound (on-tape) counterparts expose their leaves in that order too.
pub trait Parameters<T: Scalar>: Clone {
    fn tensors(&self) -> Vec<&Tensor<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Same shapes, all zeros.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
        z
    }
}

/// Affine map `x · W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform weights in `±1/sqrt(fan_in)`, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let data = (0..input * output).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
        Linear { weight: Tensor::from_vec(input, output, data), bias: Tensor::zeros(1, output) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { weight: Tensor::zeros(input, output), bias: Tensor::zeros(1, output) }
    }

    pub fn input_size(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_size(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundLinear<'t, T> {
        BoundLinear { weight: tape.leaf(self.weight.clone()), bias: tape.leaf(self.bias.clone()) }
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear<'t, T> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<'t, T: Scalar> BoundLinear<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (rows_w, _) = self.weight.shape();
        if x.shape().1 != rows_w {
            return Err(Error::shape(format!("linear layer expects width {rows_w}, got {}", x.shape().1)));
        }
        Ok(x.matmul(self.weight).add_row(self.bias))
    }

    pub fn leaves(&self) -> Vec<Var<'t, T>> {
        vec![self.weight, self.bias]
    }
}

/// Stack of affine layers, each followed by softplus (including the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn init(input: usize, sizes: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut width = input;
        for &s in sizes {
            layers.push(Linear::init(width, s, rng));
            width = s;
        }
        MlpParams { layers }
    }

    pub fn input_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_size())
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_size())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.output_size()).collect()
    }

    /// Checks that consecutive layers agree and every entry is finite.
    pub fn validate(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            if pair[0].output_size() != pair[1].input_size() {
                return Err(Error::shape("consecutive MLP layers disagree"));
            }
        }
        for l in &self.layers {
            if l.bias.shape() != (1, l.output_size()) {
                return Err(Error::shape("bias width differs from layer output"));
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("MLP parameters"));
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundMlp<'t, T> {
        BoundMlp { layers: self.layers.iter().map(|l| l.bind(tape)).collect() }
    }
}

impl<T: Scalar> Parameters<T> for MlpParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// [`MlpParams`] recorded as leaves on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp<'t, T> {
    pub layers: Vec<BoundLinear<'t, T>>,
}

impl<'t, T: Scalar> BoundMlp<'t, T> {
    pub fn forward(&self, input: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut x = input;
        for layer in &self.layers {
            x = layer.forward(x)?.softplus();
        }
        Ok(x)
    }

    pub fn leaves(&self) -> Vec<Var<'t, T>> {
        self.layers.iter().flat_map(|l| l.leaves()).collect()
    }
}

/// Evaluates `params` on `input` without keeping the tape.
pub fn mlp_forward<T: Scalar>(params: &MlpParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let x = tape.leaf(input.clone());
    let y = params.bind(&tape).forward(x)?;
    Ok(y.value().as_ref().clone())
}

/// Gradients of the scalar `loss` with respect to every leaf in `leaves`,
/// packed into a copy of `like` (same shapes, same order).
pub fn param_gradient<'t, T: Scalar, P: Parameters<T>>(loss: Var<'t, T>, leaves: &[Var<'t, T>], like: &P) -> Result<P> {
    let grads = loss.tape().gradients(loss, leaves)?;
    let mut out = like.clone();
    let slots = out.tensors_mut();
    if slots.len() != grads.len() {
        return Err(Error::shape(format!("{} parameter tensors but {} bound leaves", slots.len(), grads.len())));
    }
    for (slot, g) in slots.into_iter().zip(grads) {
        let v = g.value.value();
        if v.shape() != slot.shape() {
            return Err(Error::shape("gradient shape differs from parameter"));
        }
        slot.data_mut().copy_from_slice(v.data());
    }
    Ok(out)
}
