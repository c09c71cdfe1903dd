use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

use super::{ForwardCache, LayerKind, Mode, Saved};

/// Inverted dropout: in Train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; Eval is identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Draws one mask entry per element: `1/(1-rate)` for survivors, else 0.
    pub fn sample_mask<S: Scalar>(&self, n: usize, rng: &mut SeededRng) -> Vec<S> {
        let keep = S::from_f64(1.0 / (1.0 - self.rate));
        (0..n)
            .map(|_| {
                if (rng.next_f32() as f64) < self.rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect()
    }

    pub fn forward<S: Scalar>(
        &self,
        x: &Tensor<S>,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<(Tensor<S>, ForwardCache<S>)> {
        match mode {
            Mode::Eval => {
                let cache = ForwardCache::new(LayerKind::Dropout, mode, x, Saved::Mask(vec![]));
                Ok((x.clone(), cache))
            }
            Mode::Train => {
                let mask = self.sample_mask(x.numel(), rng);
                self.forward_with_mask(x, mask)
            }
        }
    }

    /// Train-mode forward with a caller-supplied mask, as produced by
    /// [`Dropout::sample_mask`].
    pub fn forward_with_mask<S: Scalar>(&self, x: &Tensor<S>, mask: Vec<S>) -> Result<(Tensor<S>, ForwardCache<S>)> {
        if mask.len() != x.numel() {
            return Err(Error::shape(format!(
                "dropout mask has {} entries for {} elements",
                mask.len(),
                x.numel()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| S::from_f64(v.to_f64() * m.to_f64()))
            .collect();
        let y = Tensor::from_vec(x.shape(), data)?;
        let cache = ForwardCache::new(LayerKind::Dropout, Mode::Train, &y, Saved::Mask(mask));
        Ok((y, cache))
    }

    pub fn backward<S: Scalar>(&self, cache: &ForwardCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        cache.check(LayerKind::Dropout, grad_out)?;
        let Saved::Mask(mask) = &cache.saved else {
            unreachable!()
        };
        let data = grad_out
            .data()
            .iter()
            .zip(mask)
            .map(|(&g, &m)| S::from_f64(g.to_f64() * m.to_f64()))
            .collect();
        Tensor::from_vec(grad_out.shape(), data)
    }
}
