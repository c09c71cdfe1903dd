use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{axpy, dot, Scalar, Tensor};

use super::conv::he_normal;
use super::{ForwardCache, LayerKind, Mode, Saved};

/// Fully connected layer: `y = x · Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<S: Scalar = f32> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        weight.expect_rank(2, "dense weight")?;
        if bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape("dense bias must be [out_features]"));
        }
        Ok(Dense { weight, bias })
    }

    pub fn init(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Dense {
            weight: he_normal(&[outputs, inputs], inputs, rng)?,
            bias: Tensor::zeros(&[outputs])?,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.expect_rank(2, "dense input")?;
        let (n, inputs) = (x.shape()[0], x.shape()[1]);
        if inputs != self.inputs() {
            return Err(Error::shape(format!(
                "dense layer expects {} features, got {inputs}",
                self.inputs()
            )));
        }
        let outs = self.outputs();
        let mut y = Vec::with_capacity(n * outs);
        for row in 0..n {
            let xr = &x.data()[row * inputs..][..inputs];
            for o in 0..outs {
                let wr = &self.weight.data()[o * inputs..][..inputs];
                y.push(S::from_f64(dot(xr, wr) + self.bias.data()[o].to_f64()));
            }
        }
        Tensor::from_vec(&[n, outs], y)
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, ForwardCache<S>)> {
        let y = self.infer(x)?;
        let cache = ForwardCache::new(LayerKind::Dense, mode, &y, Saved::Input(x.clone()));
        Ok((y, cache))
    }

    pub(crate) fn backward_inner(
        &self,
        cache: &ForwardCache<S>,
        grad_out: &Tensor<S>,
        want_input: bool,
    ) -> Result<(Option<Tensor<S>>, Vec<Tensor<S>>)> {
        cache.check(LayerKind::Dense, grad_out)?;
        let Saved::Input(x) = &cache.saved else {
            unreachable!()
        };
        let (n, inputs, outs) = (x.shape()[0], self.inputs(), self.outputs());
        let g = grad_out.data();

        let mut dw = vec![0.0f64; outs * inputs];
        let mut db = vec![0.0f64; outs];
        for row in 0..n {
            let xr = &x.data()[row * inputs..][..inputs];
            for o in 0..outs {
                let go = g[row * outs + o].to_f64();
                db[o] += go;
                if go != 0.0 {
                    axpy(&mut dw[o * inputs..][..inputs], go, xr);
                }
            }
        }

        let dx = if want_input {
            let mut dx = Vec::with_capacity(n * inputs);
            let mut acc = vec![0.0f64; inputs];
            for row in 0..n {
                acc.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..outs {
                    let go = g[row * outs + o].to_f64();
                    if go != 0.0 {
                        axpy(&mut acc, go, &self.weight.data()[o * inputs..][..inputs]);
                    }
                }
                dx.extend(acc.iter().map(|&v| S::from_f64(v)));
            }
            Some(Tensor::from_vec(x.shape(), dx)?)
        } else {
            None
        };

        Ok((
            dx,
            vec![
                Tensor::from_vec(self.weight.shape(), dw.into_iter().map(S::from_f64).collect())?,
                Tensor::from_vec(&[outs], db.into_iter().map(S::from_f64).collect())?,
            ],
        ))
    }
}
