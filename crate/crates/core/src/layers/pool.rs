use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{ForwardCache, LayerKind, Mode, Saved};

/// Non-overlapping 2x2 max pooling, stride 2. A trailing odd row or column
/// is dropped.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaxPool2x2;

impl MaxPool2x2 {
    fn run<S: Scalar>(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Vec<u32>)> {
        x.expect_rank(4, "max-pool")?;
        let [n, c, h, w] = x.dims4();
        if h < 2 || w < 2 {
            return Err(Error::shape(format!(
                "max-pool needs spatial size >= 2, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let data = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for idx in [best + 1, best + w, best + w + 1] {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best as u32);
                }
            }
        }
        Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, argmax))
    }

    pub fn infer<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.run(x)?.0)
    }

    pub fn forward<S: Scalar>(&self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, ForwardCache<S>)> {
        let (y, argmax) = self.run(x)?;
        let cache = ForwardCache::new(
            LayerKind::MaxPool2x2,
            mode,
            &y,
            Saved::Pool {
                in_shape: x.shape().to_vec(),
                argmax,
            },
        );
        Ok((y, cache))
    }

    pub fn backward<S: Scalar>(&self, cache: &ForwardCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        cache.check(LayerKind::MaxPool2x2, grad_out)?;
        let Saved::Pool { in_shape, argmax } = &cache.saved else {
            unreachable!()
        };
        let mut grad = Tensor::zeros(in_shape)?;
        let g = grad.data_mut();
        for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
            g[idx as usize] = v;
        }
        Ok(grad)
    }
}

/// `[n, ...] -> [n, prod(...)]`.
pub fn flatten<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let n = x.shape()[0];
    x.clone().reshape(&[n, x.numel() / n])
}

pub(crate) fn flatten_forward<S: Scalar>(x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, ForwardCache<S>)> {
    let y = flatten(x)?;
    let cache = ForwardCache::new(LayerKind::Flatten, mode, &y, Saved::Shape(x.shape().to_vec()));
    Ok((y, cache))
}

pub(crate) fn flatten_backward<S: Scalar>(cache: &ForwardCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    cache.check(LayerKind::Flatten, grad_out)?;
    let Saved::Shape(shape) = &cache.saved else {
        unreachable!()
    };
    grad_out.clone().reshape(shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn max_of_single_window() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = MaxPool2x2.infer(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn constant_halves() {
        let x = Tensor::<f32>::new(&[2, 3, 6, 8], 1.5).unwrap();
        let y = MaxPool2x2.infer(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 4]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn odd_size_window_scan() {
        let mut rng = SeededRng::new(77);
        let x = Tensor::<f32>::from_vec(&[1, 1, 7, 7], rng.uniform(49)).unwrap();
        let y = MaxPool2x2.infer(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        for oy in 0..3 {
            for ox in 0..3 {
                let mut m = f32::MIN;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.at4(0, 0, 2 * oy + dy, 2 * ox + dx));
                    }
                }
                assert_eq!(y.at4(0, 0, oy, ox), m);
            }
        }
    }

    #[test]
    fn too_small() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 4]).unwrap();
        assert!(matches!(MaxPool2x2.infer(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_routes_to_argmax() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 3], vec![0.0, 5.0, 9.0, 1.0, 2.0, 9.0]).unwrap();
        let (_, cache) = MaxPool2x2.forward(&x, Mode::Train).unwrap();
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let gi = MaxPool2x2.backward(&cache, &g).unwrap();
        assert_eq!(gi.data(), &[0.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
