//! Same-padded, stride-1 grouped cross-correlation, plus the two layers built
//! on it: plain [`Conv2d`] and depthwise-separable [`SeparableConv2d`].

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{axpy, dot, Scalar, Tensor};

use super::{ForwardCache, LayerKind, Mode, Saved};

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    groups: usize,
}

impl Geometry {
    fn check<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, groups: usize) -> Result<Self> {
        x.expect_rank(4, "convolution input")?;
        weight.expect_rank(4, "convolution weight")?;
        let [n, cin, h, w] = x.dims4();
        let [cout, cin_g, kh, kw] = weight.dims4();
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!(
                "kernel must be square with odd size, got {kh}x{kw}"
            )));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::shape(format!(
                "channel mismatch: input has {cin} channels, weight {:?} with {groups} group(s)",
                weight.shape()
            )));
        }
        Ok(Geometry {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            groups,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Valid `(y range, x range)` of output positions for tap offset `(dy, dx)`.
    fn span(&self, dy: isize, dx: isize) -> (usize, usize, usize, usize) {
        let (h, w) = (self.h as isize, self.w as isize);
        let ylo = (-dy).max(0);
        let yhi = (h - dy).min(h);
        let xlo = (-dx).max(0);
        let xhi = (w - dx).min(w);
        if ylo >= yhi || xlo >= xhi {
            return (0, 0, 0, 0);
        }
        (ylo as usize, yhi as usize, xlo as usize, xhi as usize)
    }

    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> {
        let k = self.k;
        let pad = (k / 2) as isize;
        (0..k * k).map(move |t| (t, (t / k) as isize - pad, (t % k) as isize - pad))
    }
}

fn shifted(base: usize, dy: isize, dx: isize, w: usize) -> usize {
    (base as isize + dy * w as isize + dx) as usize
}

/// Zero-padded cross-correlation preserving spatial size.
pub(crate) fn conv_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    groups: usize,
) -> Result<Tensor<S>> {
    let g = Geometry::check(x, weight, groups)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {} output channels",
                b.shape(),
                g.cout
            )));
        }
    }
    let plane = g.plane();
    let kk = g.k * g.k;
    let wdata = weight.data();
    let xdata = x.data();
    let mut out = Vec::with_capacity(g.n * g.cout * plane);
    let mut acc = vec![0.0f64; plane];
    for n in 0..g.n {
        for oc in 0..g.cout {
            let b = bias.map_or(0.0, |b| b.data()[oc].to_f64());
            acc.iter_mut().for_each(|v| *v = b);
            let grp = oc / g.cout_g();
            for icg in 0..g.cin_g() {
                let ic = grp * g.cin_g() + icg;
                let src = &xdata[(n * g.cin + ic) * plane..][..plane];
                let wk = &wdata[(oc * g.cin_g() + icg) * kk..][..kk];
                for (t, dy, dx) in g.taps() {
                    let wv = wk[t].to_f64();
                    if wv == 0.0 {
                        continue;
                    }
                    let (ylo, yhi, xlo, xhi) = g.span(dy, dx);
                    for y in ylo..yhi {
                        let d = y * g.w + xlo;
                        let s = shifted(d, dy, dx, g.w);
                        axpy(&mut acc[d..d + xhi - xlo], wv, &src[s..s + xhi - xlo]);
                    }
                }
            }
            out.extend(acc.iter().map(|&v| S::from_f64(v)));
        }
    }
    Tensor::from_vec(&[g.n, g.cout, g.h, g.w], out)
}

pub(crate) struct ConvGrads<S: Scalar> {
    pub input: Option<Tensor<S>>,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

pub(crate) fn conv_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    groups: usize,
    want_input: bool,
) -> Result<ConvGrads<S>> {
    let g = Geometry::check(x, weight, groups)?;
    if grad_out.shape() != [g.n, g.cout, g.h, g.w] {
        return Err(Error::shape(format!(
            "gradient shape {:?} does not match convolution output {:?}",
            grad_out.shape(),
            [g.n, g.cout, g.h, g.w]
        )));
    }
    let plane = g.plane();
    let kk = g.k * g.k;
    let (wdata, xdata, gdata) = (weight.data(), x.data(), grad_out.data());

    let mut dbias = vec![0.0f64; g.cout];
    let mut dweight = vec![0.0f64; weight.numel()];
    for n in 0..g.n {
        for oc in 0..g.cout {
            let go = &gdata[(n * g.cout + oc) * plane..][..plane];
            dbias[oc] += go.iter().map(|v| v.to_f64()).sum::<f64>();
            let grp = oc / g.cout_g();
            for icg in 0..g.cin_g() {
                let ic = grp * g.cin_g() + icg;
                let src = &xdata[(n * g.cin + ic) * plane..][..plane];
                let dw = &mut dweight[(oc * g.cin_g() + icg) * kk..][..kk];
                for (t, dy, dx) in g.taps() {
                    let (ylo, yhi, xlo, xhi) = g.span(dy, dx);
                    let mut s = 0.0;
                    for y in ylo..yhi {
                        let d = y * g.w + xlo;
                        let sx = shifted(d, dy, dx, g.w);
                        s += dot(&go[d..d + xhi - xlo], &src[sx..sx + xhi - xlo]);
                    }
                    dw[t] += s;
                }
            }
        }
    }

    let input = if want_input {
        let mut out = Vec::with_capacity(x.numel());
        let mut acc = vec![0.0f64; plane];
        for n in 0..g.n {
            for ic in 0..g.cin {
                acc.iter_mut().for_each(|v| *v = 0.0);
                let grp = ic / g.cin_g();
                let icg = ic % g.cin_g();
                for ocg in 0..g.cout_g() {
                    let oc = grp * g.cout_g() + ocg;
                    let go = &gdata[(n * g.cout + oc) * plane..][..plane];
                    let wk = &wdata[(oc * g.cin_g() + icg) * kk..][..kk];
                    for (t, dy, dx) in g.taps() {
                        let wv = wk[t].to_f64();
                        if wv == 0.0 {
                            continue;
                        }
                        let (ylo, yhi, xlo, xhi) = g.span(dy, dx);
                        for y in ylo..yhi {
                            let d = y * g.w + xlo;
                            let s = shifted(d, dy, dx, g.w);
                            axpy(&mut acc[s..s + xhi - xlo], wv, &go[d..d + xhi - xlo]);
                        }
                    }
                }
                out.extend(acc.iter().map(|&v| S::from_f64(v)));
            }
        }
        Some(Tensor::from_vec(x.shape(), out)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input,
        weight: Tensor::from_vec(
            weight.shape(),
            dweight.into_iter().map(S::from_f64).collect(),
        )?,
        bias: Tensor::from_vec(&[g.cout], dbias.into_iter().map(S::from_f64).collect())?,
    })
}

/// He (fan-in) normal initialisation.
pub(crate) fn he_normal<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Result<Tensor<S>> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| S::from_f64(rng.normal() * std)).collect())
}

/// Standard convolution, weight `[out, in, k, k]`, bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<S: Scalar = f32> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        weight.expect_rank(4, "conv2d weight")?;
        if bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape("conv2d bias must be [out_channels]"));
        }
        Ok(Conv2d { weight, bias })
    }

    pub fn init(in_ch: usize, out_ch: usize, k: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Conv2d {
            weight: he_normal(&[out_ch, in_ch, k, k], in_ch * k * k, rng)?,
            bias: Tensor::zeros(&[out_ch])?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        conv_forward(x, &self.weight, Some(&self.bias), 1)
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, ForwardCache<S>)> {
        let y = self.infer(x)?;
        let cache = ForwardCache::new(LayerKind::Conv2d, mode, &y, Saved::Input(x.clone()));
        Ok((y, cache))
    }

    pub(crate) fn backward_inner(
        &self,
        cache: &ForwardCache<S>,
        grad_out: &Tensor<S>,
        want_input: bool,
    ) -> Result<(Option<Tensor<S>>, Vec<Tensor<S>>)> {
        cache.check(LayerKind::Conv2d, grad_out)?;
        let Saved::Input(x) = &cache.saved else {
            unreachable!()
        };
        let g = conv_backward(x, &self.weight, grad_out, 1, want_input)?;
        Ok((g.input, vec![g.weight, g.bias]))
    }
}

/// Depthwise `[c, 1, k, k]` spatial filter followed by a pointwise
/// `[out, c, 1, 1]` channel mix and a bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableConv2d<S: Scalar = f32> {
    pub depthwise: Tensor<S>,
    pub pointwise: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> SeparableConv2d<S> {
    pub fn new(depthwise: Tensor<S>, pointwise: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        depthwise.expect_rank(4, "depthwise weight")?;
        pointwise.expect_rank(4, "pointwise weight")?;
        let c = depthwise.shape()[0];
        if depthwise.shape()[1] != 1 {
            return Err(Error::shape("depthwise weight must be [c, 1, k, k]"));
        }
        if pointwise.shape()[1] != c || pointwise.shape()[2..] != [1, 1] {
            return Err(Error::shape(format!(
                "pointwise weight {:?} does not mix {c} channels",
                pointwise.shape()
            )));
        }
        if bias.shape() != [pointwise.shape()[0]] {
            return Err(Error::shape("separable bias must be [out_channels]"));
        }
        Ok(SeparableConv2d {
            depthwise,
            pointwise,
            bias,
        })
    }

    pub fn init(in_ch: usize, out_ch: usize, k: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(SeparableConv2d {
            depthwise: he_normal(&[in_ch, 1, k, k], k * k, rng)?,
            pointwise: he_normal(&[out_ch, in_ch, 1, 1], in_ch, rng)?,
            bias: Tensor::zeros(&[out_ch])?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.depthwise.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.pointwise.shape()[0]
    }

    fn stages(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let c = self.in_channels();
        if x.rank() == 4 && x.shape()[1] != c {
            return Err(Error::shape(format!(
                "separable conv expects {c} input channels, got {}",
                x.shape()[1]
            )));
        }
        let mid = conv_forward(x, &self.depthwise, None, c)?;
        let out = conv_forward(&mid, &self.pointwise, Some(&self.bias), 1)?;
        Ok((mid, out))
    }

    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.stages(x)?.1)
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, ForwardCache<S>)> {
        let (mid, y) = self.stages(x)?;
        let cache = ForwardCache::new(
            LayerKind::SeparableConv2d,
            mode,
            &y,
            Saved::Separable {
                input: x.clone(),
                mid,
            },
        );
        Ok((y, cache))
    }

    pub(crate) fn backward_inner(
        &self,
        cache: &ForwardCache<S>,
        grad_out: &Tensor<S>,
        want_input: bool,
    ) -> Result<(Option<Tensor<S>>, Vec<Tensor<S>>)> {
        cache.check(LayerKind::SeparableConv2d, grad_out)?;
        let Saved::Separable { input, mid } = &cache.saved else {
            unreachable!()
        };
        let pw = conv_backward(mid, &self.pointwise, grad_out, 1, true)?;
        let grad_mid = pw.input.expect("pointwise input gradient");
        let dw = conv_backward(input, &self.depthwise, &grad_mid, self.in_channels(), want_input)?;
        Ok((dw.input, vec![dw.weight, pw.weight, pw.bias]))
    }
}
