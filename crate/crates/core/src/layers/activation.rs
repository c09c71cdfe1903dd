use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

use super::{ForwardCache, LayerKind, Mode, Saved};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    fn kind(self) -> LayerKind {
        match self {
            Activation::Relu => LayerKind::Relu,
            Activation::Sigmoid => LayerKind::Sigmoid,
        }
    }

    pub fn apply<S: Scalar>(self, x: &Tensor<S>) -> Tensor<S> {
        match self {
            Activation::Relu => x.map(|v| if v.to_f64() > 0.0 { v } else { S::zero() }),
            // keep the stored probability strictly inside (0, 1)
            Activation::Sigmoid => x.map(|v| {
                S::from_f64(sigmoid(v.to_f64()).clamp(S::TINY, 1.0 - S::GAP_BELOW_ONE))
            }),
        }
    }

    pub fn forward<S: Scalar>(self, x: &Tensor<S>, mode: Mode) -> (Tensor<S>, ForwardCache<S>) {
        let y = self.apply(x);
        let cache = ForwardCache::new(self.kind(), mode, &y, Saved::Output(y.clone()));
        (y, cache)
    }

    /// Both derivatives are expressed through the saved output:
    /// `relu' = [y > 0]`, `sigmoid' = y (1 - y)`.
    pub fn backward<S: Scalar>(self, cache: &ForwardCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        cache.check(self.kind(), grad_out)?;
        let Saved::Output(y) = &cache.saved else {
            unreachable!()
        };
        let data = grad_out
            .data()
            .iter()
            .zip(y.data())
            .map(|(&g, &y)| {
                let (g, y) = (g.to_f64(), y.to_f64());
                S::from_f64(match self {
                    Activation::Relu => {
                        if y > 0.0 {
                            g
                        } else {
                            0.0
                        }
                    }
                    Activation::Sigmoid => g * y * (1.0 - y),
                })
            })
            .collect();
        Tensor::from_vec(grad_out.shape(), data)
    }
}
