//! Central-difference gradient checks in f64 for every layer type, BCE and a
//! small end-to-end model.

use pneumonet::layers::{Activation, BatchNorm, Conv2d, Dense, Dropout, Layer, Mode, SeparableConv2d};
use pneumonet::train::bce_loss;
use pneumonet::{Model, ModelConfig, SeededRng, Tensor};

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-5;
const INSTANCES: usize = 20;
/// Denominator floor so components that are zero on both sides compare by
/// absolute difference.
const FLOOR: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Values at least 0.05 away from zero so ReLU kinks stay outside the
/// finite-difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    random(shape, rng).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

/// Distinct values on a 0.01 grid (plus jitter far below it) so every
/// pooling window has a unique maximum with a margin much larger than the
/// step.
fn distinct(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut ranks);
    Tensor::from_vec(shape, ranks.iter().map(|&r| r as f64 * 0.01 + 1e-4 * rng.next_f64()).collect()).unwrap()
}

/// `L = sum(weights * f(x))`, so `dL/dy = weights`.
fn weighted(y: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

fn probe(base: &mut Tensor<f64>, i: usize, f: &mut dyn FnMut(&Tensor<f64>) -> f64) -> f64 {
    let orig = base.data()[i];
    base.data_mut()[i] = orig + STEP;
    let up = f(base);
    base.data_mut()[i] = orig - STEP;
    let down = f(base);
    base.data_mut()[i] = orig;
    (up - down) / (2.0 * STEP)
}

/// Max relative error over the input and every parameter of a layer.
fn check_layer(layer: &Layer<f64>, x: &Tensor<f64>, rng: &mut SeededRng) -> f64 {
    let loss = |l: &Layer<f64>, input: &Tensor<f64>, w: &Tensor<f64>| {
        let mut l = l.clone();
        let (y, _) = l.forward(input, Mode::Train, &mut SeededRng::new(0)).unwrap();
        weighted(&y, w)
    };
    let mut probe_layer = layer.clone();
    let (y, cache) = probe_layer.forward(x, Mode::Train, &mut SeededRng::new(0)).unwrap();
    let w = random(y.shape(), rng);
    let (gin, pgrads) = layer.backward(&cache, &w).unwrap();

    let mut worst: f64 = 0.0;
    let mut xv = x.clone();
    for i in 0..x.numel() {
        let n = probe(&mut xv, i, &mut |t| loss(layer, t, &w));
        worst = worst.max(rel_err(gin.data()[i], n));
    }
    assert_eq!(pgrads.len(), layer.params().len());
    for (p, g) in pgrads.iter().enumerate() {
        assert_eq!(g.shape(), layer.params()[p].shape());
        let mut pv = layer.params()[p].clone();
        for i in 0..pv.numel() {
            let n = probe(&mut pv, i, &mut |t| {
                let mut l = layer.clone();
                *l.params_mut()[p] = t.clone();
                loss(&l, x, &w)
            });
            worst = worst.max(rel_err(g.data()[i], n));
        }
    }
    worst
}

fn run_suite(name: &str, mut make: impl FnMut(&mut SeededRng) -> (Layer<f64>, Tensor<f64>)) {
    let mut rng = SeededRng::new(name.bytes().map(u64::from).sum());
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (layer, x) = make(&mut rng);
        worst = worst.max(check_layer(&layer, &x, &mut rng));
    }
    assert!(worst < TOLERANCE, "{name}: max relative error {worst:e}");
}

fn dims(rng: &mut SeededRng) -> (usize, usize, usize, usize) {
    (1 + rng.below(2) as usize, 1 + rng.below(3) as usize, 3 + rng.below(4) as usize, 3 + rng.below(4) as usize)
}

fn odd_kernel(rng: &mut SeededRng) -> usize {
    [1, 3, 5][rng.below(3) as usize]
}

#[test]
fn conv2d() {
    run_suite("conv2d", |rng| {
        let (n, c, h, w) = dims(rng);
        let (out, k) = (1 + rng.below(3) as usize, odd_kernel(rng));
        let layer = Conv2d::new(random(&[out, c, k, k], rng), random(&[out], rng)).unwrap();
        (Layer::Conv2d(layer), random(&[n, c, h, w], rng))
    });
}

#[test]
fn separable_conv2d() {
    run_suite("separable", |rng| {
        let (n, c, h, w) = dims(rng);
        let (out, k) = (1 + rng.below(3) as usize, odd_kernel(rng));
        let layer = SeparableConv2d::new(
            random(&[c, 1, k, k], rng),
            random(&[out, c, 1, 1], rng),
            random(&[out], rng),
        )
        .unwrap();
        (Layer::SeparableConv2d(layer), random(&[n, c, h, w], rng))
    });
}

#[test]
fn max_pool() {
    run_suite("maxpool", |rng| {
        let (n, c, h, w) = dims(rng);
        (Layer::MaxPool2x2, distinct(&[n, c, h + 1, w + 1], rng))
    });
}

#[test]
fn batch_norm() {
    run_suite("batchnorm", |rng| {
        let (n, c, h, w) = dims(rng);
        let mut bn = BatchNorm::new(c).unwrap();
        bn.gamma = random(&[c], rng);
        bn.beta = random(&[c], rng);
        // keep batch variance well away from zero
        (Layer::BatchNorm(bn), random(&[n, c, h, w], rng).map(|v| 2.0 * v))
    });
}

#[test]
fn dense() {
    run_suite("dense", |rng| {
        let (n, i, o) = (1 + rng.below(4) as usize, 1 + rng.below(8) as usize, 1 + rng.below(5) as usize);
        let layer = Dense::new(random(&[o, i], rng), random(&[o], rng)).unwrap();
        (Layer::Dense(layer), random(&[n, i], rng))
    });
}

#[test]
fn relu() {
    run_suite("relu", |rng| {
        let (n, c, h, w) = dims(rng);
        (Layer::Activation(Activation::Relu), away_from_zero(&[n, c, h, w], rng))
    });
}

#[test]
fn sigmoid() {
    run_suite("sigmoid", |rng| {
        let n = 1 + rng.below(6) as usize;
        (Layer::Activation(Activation::Sigmoid), random(&[n, 1], rng).map(|v| 3.0 * v))
    });
}

#[test]
fn flatten() {
    run_suite("flatten", |rng| {
        let (n, c, h, w) = dims(rng);
        (Layer::Flatten, random(&[n, c, h, w], rng))
    });
}

#[test]
fn dropout_with_fixed_mask() {
    let mut rng = SeededRng::new(77);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let rate = [0.3, 0.5, 0.7][rng.below(3) as usize];
        let d = Dropout::new(rate).unwrap();
        let x = random(&[1 + rng.below(3) as usize, 2 + rng.below(10) as usize], &mut rng);
        let mask: Vec<f64> = d.sample_mask(x.numel(), &mut rng);
        let (y, cache) = d.forward_with_mask(&x, mask.clone()).unwrap();
        let w = random(y.shape(), &mut rng);
        let g = d.backward(&cache, &w).unwrap();
        let mut xv = x.clone();
        for i in 0..x.numel() {
            let n = probe(&mut xv, i, &mut |t| weighted(&d.forward_with_mask(t, mask.clone()).unwrap().0, &w));
            worst = worst.max(rel_err(g.data()[i], n));
        }
    }
    assert!(worst < TOLERANCE, "dropout: max relative error {worst:e}");
}

#[test]
fn binary_cross_entropy() {
    let mut rng = SeededRng::new(91);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let n = 1 + rng.below(8) as usize;
        let p = Tensor::from_vec(&[n, 1], (0..n).map(|_| 0.02 + 0.96 * rng.next_f64()).collect()).unwrap();
        let y: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
        let (_, g) = bce_loss(&p, &y).unwrap();
        let mut pv = p.clone();
        for i in 0..n {
            let num = probe(&mut pv, i, &mut |t| bce_loss(t, &y).unwrap().0);
            worst = worst.max(rel_err(g.data()[i], num));
        }
    }
    assert!(worst < TOLERANCE, "bce: max relative error {worst:e}");
}

/// BCE through a whole miniature network, with dropout masks replayed by
/// reseeding the forward pass.
#[test]
fn whole_model() {
    let cfg = ModelConfig {
        input: [3, 8, 8],
        kernel: 3,
        block1_filters: 2,
        block1_convs: 2,
        separable_filters: vec![2, 3],
        dense_units: vec![6, 4],
        dropout_rates: vec![0.5, 0.25],
    };
    let mut rng = SeededRng::new(5);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let mut model = Model::<f64>::build(&cfg, &mut rng).unwrap();
        // zero-initialised biases can leave a pre-activation exactly on a ReLU kink
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
        let x = random(&[3, 3, 8, 8], &mut rng);
        let y = [0u8, 1, 1];
        let seed = rng.next_u32() as u64;
        let loss = |m: &Model<f64>| {
            let mut m = m.clone();
            let (p, _) = m.forward_train(&x, &mut SeededRng::new(seed)).unwrap();
            bce_loss(&p, &y).unwrap().0
        };
        let mut m = model.clone();
        let (p, caches) = m.forward_train(&x, &mut SeededRng::new(seed)).unwrap();
        let (_, dp) = bce_loss(&p, &y).unwrap();
        let grads = m.backward(&caches, &dp).unwrap();
        for (li, layer_grads) in grads.iter().enumerate() {
            for (pi, g) in layer_grads.iter().enumerate() {
                let mut pv = model.layers()[li].params()[pi].clone();
                for i in 0..pv.numel() {
                    let n = probe(&mut pv, i, &mut |t| {
                        let mut mm = model.clone();
                        *mm.layers_mut()[li].params_mut()[pi] = t.clone();
                        loss(&mm)
                    });
                    worst = worst.max(rel_err(g.data()[i], n));
                }
            }
        }
    }
    assert!(worst < TOLERANCE, "model: max relative error {worst:e}");
}
