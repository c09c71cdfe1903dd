use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{ForwardCache, LayerKind, Mode, Saved};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-channel batch normalisation over `(n, h, w)` of an `[n, c, h, w]`
/// tensor.
///
/// Train mode normalises with the biased batch variance and folds the batch
/// statistics into the running ones as
/// `running = momentum * running + (1 - momentum) * batch`.
/// Eval mode normalises with the running statistics only.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<S: Scalar = f32> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: Tensor::new(&[channels], S::from_f64(1.0))?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::new(&[channels], S::from_f64(1.0))?,
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<[usize; 4]> {
        x.expect_rank(4, "batch-norm")?;
        let dims = x.dims4();
        if dims[1] != self.channels() {
            return Err(Error::shape(format!(
                "batch-norm over {} channels given {:?}",
                self.channels(),
                x.shape()
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Param("batch-norm epsilon must be positive".into()));
        }
        Ok(dims)
    }

    fn normalize(&self, x: &Tensor<S>, mean: &[f64], inv_std: &[f64]) -> (Tensor<S>, Tensor<S>) {
        let [n, c, h, w] = x.dims4();
        let plane = h * w;
        let mut x_hat = Vec::with_capacity(x.numel());
        let mut y = Vec::with_capacity(x.numel());
        for b in 0..n {
            for ch in 0..c {
                let g = self.gamma.data()[ch].to_f64();
                let be = self.beta.data()[ch].to_f64();
                for &v in &x.data()[(b * c + ch) * plane..][..plane] {
                    let xh = (v.to_f64() - mean[ch]) * inv_std[ch];
                    x_hat.push(S::from_f64(xh));
                    y.push(S::from_f64(g * xh + be));
                }
            }
        }
        let shape = x.shape();
        (
            Tensor::from_vec(shape, x_hat).expect("same shape"),
            Tensor::from_vec(shape, y).expect("same shape"),
        )
    }

    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let mean: Vec<f64> = self.running_mean.data().iter().map(|v| v.to_f64()).collect();
        let inv_std: Vec<f64> = self
            .running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v.to_f64().max(0.0) + self.epsilon).sqrt())
            .collect();
        Ok(self.normalize(x, &mean, &inv_std).1)
    }

    /// Per-channel biased mean and variance, two-pass in 64-bit.
    pub fn batch_stats(x: &Tensor<S>) -> (Vec<f64>, Vec<f64>) {
        let [n, c, h, w] = x.dims4();
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let slabs = (0..n).map(|b| &x.data()[(b * c + ch) * plane..][..plane]);
            mean[ch] = slabs.clone().flatten().map(|v| v.to_f64()).sum::<f64>() / count;
            var[ch] = slabs
                .flatten()
                .map(|v| (v.to_f64() - mean[ch]).powi(2))
                .sum::<f64>()
                / count;
        }
        (mean, var)
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, ForwardCache<S>)> {
        let [n, _, h, w] = self.check_input(x)?;
        if mode == Mode::Eval {
            let y = self.infer(x)?;
            let cache = ForwardCache::new(LayerKind::BatchNorm, mode, &y, Saved::Shape(vec![]));
            return Ok((y, cache));
        }
        if n * h * w < 2 {
            return Err(Error::Stats(format!(
                "batch-norm in Train mode needs at least 2 values per channel, got {}",
                n * h * w
            )));
        }
        let (mean, var) = Self::batch_stats(x);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let (x_hat, y) = self.normalize(x, &mean, &inv_std);

        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&mean) {
            *r = S::from_f64(m * r.to_f64() + (1.0 - m) * b);
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&var) {
            *r = S::from_f64(m * r.to_f64() + (1.0 - m) * b);
        }

        let cache = ForwardCache::new(LayerKind::BatchNorm, mode, &y, Saved::Norm { x_hat, inv_std });
        Ok((y, cache))
    }

    /// Gradients `(dx, [dgamma, dbeta])`, including the paths through the
    /// batch mean and variance.
    pub fn backward(&self, cache: &ForwardCache<S>, grad_out: &Tensor<S>) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
        cache.check(LayerKind::BatchNorm, grad_out)?;
        let Saved::Norm { x_hat, inv_std } = &cache.saved else {
            unreachable!()
        };
        let [n, c, h, w] = grad_out.dims4();
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for (g, xh) in grad_out.data()[off..off + plane].iter().zip(&x_hat.data()[off..off + plane]) {
                    dbeta[ch] += g.to_f64();
                    dgamma[ch] += g.to_f64() * xh.to_f64();
                }
            }
        }
        let mut dx = vec![S::zero(); grad_out.numel()];
        for b in 0..n {
            for ch in 0..c {
                let gamma = self.gamma.data()[ch].to_f64();
                let k = gamma * inv_std[ch] / count;
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let g = grad_out.data()[i].to_f64();
                    let xh = x_hat.data()[i].to_f64();
                    dx[i] = S::from_f64(k * (count * g - dbeta[ch] - xh * dgamma[ch]));
                }
            }
        }
        Ok((
            Tensor::from_vec(grad_out.shape(), dx)?,
            vec![
                Tensor::from_vec(&[c], dgamma.into_iter().map(S::from_f64).collect())?,
                Tensor::from_vec(&[c], dbeta.into_iter().map(S::from_f64).collect())?,
            ],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal() * 3.0 + 1.0).collect()).unwrap()
    }

    #[test]
    fn constant_batch_normalises_to_zero() {
        let mut bn = BatchNorm::<f64>::new(2).unwrap();
        let x = Tensor::new(&[3, 2, 2, 2], 4.0).unwrap();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn beta_shifts_mean() {
        let mut bn = BatchNorm::<f32>::new(3).unwrap();
        bn.beta = Tensor::new(&[3], 5.0).unwrap();
        let x = random(&[4, 3, 3, 3], 8).cast::<f32>();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        let (mean, _) = BatchNorm::batch_stats(&y);
        for m in mean {
            assert!((m - 5.0).abs() < 1e-5, "{m}");
        }
    }

    #[test]
    fn output_statistics_match_gamma_beta() {
        let mut bn = BatchNorm::<f32>::new(2).unwrap();
        bn.gamma = Tensor::from_vec(&[2], vec![2.0, 0.5]).unwrap();
        bn.beta = Tensor::from_vec(&[2], vec![-1.0, 3.0]).unwrap();
        let x = random(&[5, 2, 4, 4], 21).cast::<f32>();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();

        // independent recomputation of the statistics
        for ch in 0..2 {
            let vals: Vec<f64> = (0..5)
                .flat_map(|b| (0..16).map(move |i| (b, i)))
                .map(|(b, i)| y.data()[(b * 2 + ch) * 16 + i] as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let gamma = bn.gamma.data()[ch] as f64;
            let beta = bn.beta.data()[ch] as f64;
            assert!((mean - beta).abs() < 1e-4);
            // var(x_hat) = var / (var + eps), so allow the epsilon shrinkage
            assert!((var - gamma * gamma).abs() < 1e-4 * gamma * gamma + 1e-5, "{var}");
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNorm::<f64>::new(1).unwrap();
        let x = Tensor::from_vec(&[4, 1, 1, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        assert!((bn.running_mean.data()[0] - 0.1 * 3.0).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 3.5)).abs() < 1e-12);
    }

    #[test]
    fn eval_uses_running_stats_and_leaves_them() {
        let mut bn = BatchNorm::<f64>::new(1).unwrap();
        bn.running_mean = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        bn.running_var = Tensor::from_vec(&[1], vec![4.0]).unwrap();
        let before = bn.clone();
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![4.0, 0.0]).unwrap();
        let (y, _) = bn.forward(&x, Mode::Eval).unwrap();
        let s = (4.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - 2.0 / s).abs() < 1e-12);
        assert!((y.data()[1] + 2.0 / s).abs() < 1e-12);
        assert_eq!(bn, before);
    }

    #[test]
    fn single_value_batch_is_stats_error() {
        let mut bn = BatchNorm::<f32>::new(1).unwrap();
        let x = Tensor::new(&[1, 1, 1, 1], 1.0).unwrap();
        assert!(matches!(bn.forward(&x, Mode::Train), Err(Error::Stats(_))));
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn eval_cache_rejected_by_backward() {
        let mut bn = BatchNorm::<f32>::new(1).unwrap();
        let x = Tensor::new(&[2, 1, 1, 1], 1.0).unwrap();
        let (y, cache) = bn.forward(&x, Mode::Eval).unwrap();
        assert!(matches!(bn.backward(&cache, &y), Err(Error::Usage(_))));
    }
}
