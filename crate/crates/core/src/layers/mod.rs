//! Layer-wise forward and backward passes.
//!
//! Each layer's `forward` returns its output together with a
//! [`ForwardCache`]; `backward` consumes that cache and the upstream
//! gradient and returns the gradient with respect to the layer input plus
//! one gradient tensor per trainable parameter, in [`Layer::params`] order.

mod activation;
mod conv;
mod dense;
mod dropout;
mod norm;
mod pool;

pub use activation::Activation;
pub use conv::{Conv2d, SeparableConv2d};
pub use dense::Dense;
pub use dropout::Dropout;
pub use norm::BatchNorm;
pub use pool::{flatten, MaxPool2x2};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    SeparableConv2d,
    BatchNorm,
    Relu,
    Sigmoid,
    MaxPool2x2,
    Flatten,
    Dense,
    Dropout,
}

/// State saved by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<S: Scalar = f32> {
    kind: LayerKind,
    mode: Mode,
    out_shape: Vec<usize>,
    pub(crate) saved: Saved<S>,
}

#[derive(Clone, Debug)]
pub(crate) enum Saved<S: Scalar> {
    Input(Tensor<S>),
    Output(Tensor<S>),
    Separable { input: Tensor<S>, mid: Tensor<S> },
    Pool { in_shape: Vec<usize>, argmax: Vec<u32> },
    Norm { x_hat: Tensor<S>, inv_std: Vec<f64> },
    Mask(Vec<S>),
    Shape(Vec<usize>),
}

impl<S: Scalar> ForwardCache<S> {
    pub(crate) fn new(kind: LayerKind, mode: Mode, out: &Tensor<S>, saved: Saved<S>) -> Self {
        ForwardCache {
            kind,
            mode,
            out_shape: out.shape().to_vec(),
            saved,
        }
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub(crate) fn check(&self, kind: LayerKind, grad_out: &Tensor<S>) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Usage(format!(
                "cache from a {:?} forward pass given to a {kind:?} layer",
                self.kind
            )));
        }
        if self.mode != Mode::Train {
            return Err(Error::Usage(format!(
                "{kind:?} backward needs a Train-mode cache"
            )));
        }
        if grad_out.shape() != self.out_shape.as_slice() {
            return Err(Error::shape(format!(
                "{kind:?} backward: gradient shape {:?} differs from forward output {:?}",
                grad_out.shape(),
                self.out_shape
            )));
        }
        Ok(())
    }
}

/// One gradient tensor per parameter, in [`Layer::params`] order.
pub type ParamGrads<S> = Vec<Tensor<S>>;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<S: Scalar = f32> {
    Conv2d(Conv2d<S>),
    SeparableConv2d(SeparableConv2d<S>),
    BatchNorm(BatchNorm<S>),
    Activation(Activation),
    MaxPool2x2,
    Flatten,
    Dense(Dense<S>),
    Dropout(Dropout),
}

impl<S: Scalar> Layer<S> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::SeparableConv2d(_) => LayerKind::SeparableConv2d,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Activation(Activation::Relu) => LayerKind::Relu,
            Layer::Activation(Activation::Sigmoid) => LayerKind::Sigmoid,
            Layer::MaxPool2x2 => LayerKind::MaxPool2x2,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Dropout(_) => LayerKind::Dropout,
        }
    }

    /// Eval-mode forward. Pure: no randomness, no state change.
    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Layer::Conv2d(l) => l.infer(x),
            Layer::SeparableConv2d(l) => l.infer(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::Activation(a) => Ok(a.apply(x)),
            Layer::MaxPool2x2 => MaxPool2x2.infer(x),
            Layer::Flatten => flatten(x),
            Layer::Dense(l) => l.infer(x),
            Layer::Dropout(_) => Ok(x.clone()),
        }
    }

    /// Forward pass recording a cache. Train mode may consume `rng`
    /// (dropout) and update running statistics (batch norm).
    pub fn forward(
        &mut self,
        x: &Tensor<S>,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<(Tensor<S>, ForwardCache<S>)> {
        match self {
            Layer::Conv2d(l) => l.forward(x, mode),
            Layer::SeparableConv2d(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Activation(a) => Ok(a.forward(x, mode)),
            Layer::MaxPool2x2 => MaxPool2x2.forward(x, mode),
            Layer::Flatten => pool::flatten_forward(x, mode),
            Layer::Dense(l) => l.forward(x, mode),
            Layer::Dropout(l) => l.forward(x, mode, rng),
        }
    }

    pub fn backward(
        &self,
        cache: &ForwardCache<S>,
        grad_out: &Tensor<S>,
    ) -> Result<(Tensor<S>, ParamGrads<S>)> {
        let (input, params) = self.backward_inner(cache, grad_out, true)?;
        Ok((input.expect("input gradient requested"), params))
    }

    pub(crate) fn backward_inner(
        &self,
        cache: &ForwardCache<S>,
        grad_out: &Tensor<S>,
        want_input: bool,
    ) -> Result<(Option<Tensor<S>>, ParamGrads<S>)> {
        match self {
            Layer::Conv2d(l) => l.backward_inner(cache, grad_out, want_input),
            Layer::SeparableConv2d(l) => l.backward_inner(cache, grad_out, want_input),
            Layer::BatchNorm(l) => l.backward(cache, grad_out).map(|(g, p)| (Some(g), p)),
            Layer::Activation(a) => a.backward(cache, grad_out).map(|g| (Some(g), vec![])),
            Layer::MaxPool2x2 => MaxPool2x2.backward(cache, grad_out).map(|g| (Some(g), vec![])),
            Layer::Flatten => pool::flatten_backward(cache, grad_out).map(|g| (Some(g), vec![])),
            Layer::Dense(l) => l.backward_inner(cache, grad_out, want_input),
            Layer::Dropout(l) => l.backward(cache, grad_out).map(|g| (Some(g), vec![])),
        }
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Tensor<S>> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::SeparableConv2d(l) => vec![&l.depthwise, &l.pointwise, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::SeparableConv2d(l) => vec![&mut l.depthwise, &mut l.pointwise, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => vec![],
        }
    }

    /// Everything persisted in a checkpoint: parameters, then running
    /// statistics.
    pub fn state(&self) -> Vec<&Tensor<S>> {
        let mut out = self.params();
        if let Layer::BatchNorm(l) = self {
            out.push(&l.running_mean);
            out.push(&l.running_var);
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Layer::BatchNorm(l) => vec![
                &mut l.gamma,
                &mut l.beta,
                &mut l.running_mean,
                &mut l.running_var,
            ],
            other => other.params_mut(),
        }
    }
}
