//! The pneumonia classifier: a declarative [`ModelConfig`] and the
//! [`Model`] built from it.
//!
//! Layer order for a config with `k` separable blocks:
//!
//! ```text
//! [conv, relu] x block1_convs, pool
//! [sepconv f, batchnorm, relu, pool]   for f in separable_filters
//! flatten, [dense u, relu, dropout r]  for (u, r) in dense_units/dropout_rates
//! dense 1, sigmoid
//! ```

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::{
    Activation, BatchNorm, Conv2d, Dense, Dropout, ForwardCache, Layer, Mode, ParamGrads,
    SeparableConv2d,
};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// `(channels, height, width)` of one input image.
    pub input: [usize; 3],
    pub kernel: usize,
    pub block1_filters: usize,
    pub block1_convs: usize,
    pub separable_filters: Vec<usize>,
    pub dense_units: Vec<usize>,
    pub dropout_rates: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input: [3, 150, 150],
            kernel: 3,
            block1_filters: 16,
            block1_convs: 2,
            separable_filters: vec![32, 64, 128, 256],
            dense_units: vec![512, 128, 64],
            dropout_rates: vec![0.7, 0.5, 0.3],
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(config_err(format!("input dimensions must be positive, got {:?}", self.input)));
        }
        if self.kernel % 2 == 0 {
            return Err(config_err(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.block1_filters == 0 || self.block1_convs == 0 {
            return Err(config_err("block 1 needs at least one conv layer with filters"));
        }
        if self.separable_filters.contains(&0) {
            return Err(config_err("separable filter counts must be positive"));
        }
        if self.separable_filters.windows(2).any(|p| p[0] >= p[1]) {
            return Err(config_err(format!(
                "separable filter counts must strictly increase, got {:?}",
                self.separable_filters
            )));
        }
        if self.dense_units.len() != self.dropout_rates.len() {
            return Err(config_err(format!(
                "{} dense layers but {} dropout rates",
                self.dense_units.len(),
                self.dropout_rates.len()
            )));
        }
        if self.dense_units.iter().any(|&u| u == 0) {
            return Err(config_err("dense unit counts must be positive"));
        }
        if let Some(r) = self.dropout_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(config_err(format!("dropout rate {r} outside [0, 1)")));
        }
        let mut hw = (h, w);
        for _ in 0..self.pool_count() {
            if hw.0 < 2 || hw.1 < 2 {
                return Err(config_err(format!(
                    "input {h}x{w} is too small for {} pooling stages",
                    self.pool_count()
                )));
            }
            hw = (hw.0 / 2, hw.1 / 2);
        }
        Ok(())
    }

    pub fn pool_count(&self) -> usize {
        1 + self.separable_filters.len()
    }

    /// Spatial height after the input and after each pooling stage.
    pub fn spatial_chain(&self) -> Vec<(usize, usize)> {
        let mut hw = (self.input[1], self.input[2]);
        let mut chain = vec![hw];
        for _ in 0..self.pool_count() {
            hw = (hw.0 / 2, hw.1 / 2);
            chain.push(hw);
        }
        chain
    }

    pub fn final_channels(&self) -> usize {
        self.separable_filters
            .last()
            .copied()
            .unwrap_or(self.block1_filters)
    }

    pub fn flatten_width(&self) -> usize {
        let (h, w) = *self.spatial_chain().last().expect("non-empty chain");
        self.final_channels() * h * w
    }

    /// `key = value` text, as embedded in checkpoints.
    pub fn to_text(&self) -> String {
        fn list<T: fmt::Display>(xs: &[T]) -> String {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        format!(
            "input = {}x{}x{}\nkernel = {}\nblock1_filters = {}\nblock1_convs = {}\n\
             separable_filters = {}\ndense_units = {}\ndropout_rates = {}\n",
            self.input[0],
            self.input[1],
            self.input[2],
            self.kernel,
            self.block1_filters,
            self.block1_convs,
            list(&self.separable_filters),
            list(&self.dense_units),
            list(&self.dropout_rates),
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        fn nums<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            if v.trim().is_empty() {
                return Ok(vec![]);
            }
            v.split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| config_err(format!("bad value {p:?} for {key}")))
                })
                .collect()
        }
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let one = |key: &str| -> Result<usize> {
                value
                    .parse()
                    .map_err(|_| config_err(format!("bad value {value:?} for {key}")))
            };
            match key {
                "input" => {
                    let dims: Vec<usize> = value
                        .split('x')
                        .map(|d| d.trim().parse().map_err(|_| config_err(format!("bad input {value:?}"))))
                        .collect::<Result<_>>()?;
                    cfg.input = dims
                        .try_into()
                        .map_err(|_| config_err(format!("input must be CxHxW, got {value:?}")))?;
                }
                "kernel" => cfg.kernel = one(key)?,
                "block1_filters" => cfg.block1_filters = one(key)?,
                "block1_convs" => cfg.block1_convs = one(key)?,
                "separable_filters" => cfg.separable_filters = nums(key, value)?,
                "dense_units" => cfg.dense_units = nums(key, value)?,
                "dropout_rates" => cfg.dropout_rates = nums(key, value)?,
                other => return Err(config_err(format!("unknown model key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar = f32> {
    config: ModelConfig,
    layers: Vec<Layer<S>>,
}

impl<S: Scalar> Model<S> {
    /// Instantiates every layer: He-normal weights drawn from `rng` in build
    /// order, zero biases, batch-norm gamma 1 / beta 0.
    pub fn build(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut layers = Vec::new();
        let mut ch = config.input[0];
        for _ in 0..config.block1_convs {
            layers.push(Layer::Conv2d(Conv2d::init(ch, config.block1_filters, k, rng)?));
            layers.push(Layer::Activation(Activation::Relu));
            ch = config.block1_filters;
        }
        layers.push(Layer::MaxPool2x2);
        for &f in &config.separable_filters {
            layers.push(Layer::SeparableConv2d(SeparableConv2d::init(ch, f, k, rng)?));
            layers.push(Layer::BatchNorm(BatchNorm::new(f)?));
            layers.push(Layer::Activation(Activation::Relu));
            layers.push(Layer::MaxPool2x2);
            ch = f;
        }
        layers.push(Layer::Flatten);
        let mut width = config.flatten_width();
        for (&units, &rate) in config.dense_units.iter().zip(&config.dropout_rates) {
            layers.push(Layer::Dense(Dense::init(width, units, rng)?));
            layers.push(Layer::Activation(Activation::Relu));
            layers.push(Layer::Dropout(Dropout::new(rate)?));
            width = units;
        }
        layers.push(Layer::Dense(Dense::init(width, 1, rng)?));
        layers.push(Layer::Activation(Activation::Sigmoid));
        Ok(Model {
            config: config.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|p| p.numel())
            .sum()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn check_batch(&self, batch: &Tensor<S>) -> Result<()> {
        let [c, h, w] = self.config.input;
        if batch.rank() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(Error::shape(format!(
                "model expects [n, {c}, {h}, {w}] input, got {:?}",
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Eval-mode forward: `[n, c, h, w] -> [n, 1]` probabilities. Pure.
    pub fn infer(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_batch(batch)?;
        let mut x = self.layers[0].infer(batch)?;
        for layer in &self.layers[1..] {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    /// Forward in either mode. Eval delegates to [`Model::infer`] and
    /// leaves `rng` untouched.
    pub fn forward(&mut self, batch: &Tensor<S>, mode: Mode, rng: &mut SeededRng) -> Result<Tensor<S>> {
        match mode {
            Mode::Eval => self.infer(batch),
            Mode::Train => Ok(self.forward_train(batch, rng)?.0),
        }
    }

    /// Train-mode forward keeping one cache per layer for [`Model::backward`].
    pub fn forward_train(
        &mut self,
        batch: &Tensor<S>,
        rng: &mut SeededRng,
    ) -> Result<(Tensor<S>, Vec<ForwardCache<S>>)> {
        self.check_batch(batch)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &mut self.layers {
            let (y, cache) = layer.forward(&x, Mode::Train, rng)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Back-propagates `grad_out` (gradient wrt the `[n, 1]` output) and
    /// returns parameter gradients per layer, aligned with `layers()`.
    pub fn backward(&self, caches: &[ForwardCache<S>], grad_out: &Tensor<S>) -> Result<Vec<ParamGrads<S>>> {
        if caches.len() != self.layers.len() {
            return Err(Error::Usage(format!(
                "{} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        let mut grads = vec![Vec::new(); self.layers.len()];
        let mut g = grad_out.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let (gin, pg) = layer.backward_inner(cache, &g, i > 0)?;
            grads[i] = pg;
            if let Some(gin) = gin {
                g = gin;
            }
        }
        Ok(grads)
    }

    /// Probability of pneumonia for one preprocessed `[c, h, w]` image.
    pub fn predict_proba(&self, image: &Tensor<S>) -> Result<f64> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let batch = image.clone().reshape(&shape)?;
        let out = self.infer(&batch)?;
        Ok(out.data()[0].to_f64())
    }
}
