use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub rotation_max_degrees: f64,
    pub horizontal_flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_max_degrees: 15.0,
            horizontal_flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=45.0).contains(&self.rotation_max_degrees) {
            return Err(Error::Config(format!(
                "rotation_max_degrees {} outside [0, 45]",
                self.rotation_max_degrees
            )));
        }
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::Config(format!(
                "horizontal_flip_prob {} outside [0, 1]",
                self.horizontal_flip_prob
            )));
        }
        Ok(())
    }
}

fn dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(format!("expected [c, h, w] image, got {s:?}"))),
    }
}

pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    let (_, _, w) = dims(img)?;
    let mut out = img.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Rotates each channel by `degrees` about the centre `((h-1)/2, (w-1)/2)`
/// with bilinear sampling; samples falling outside the image read as 0.
/// Positive angles turn the picture counter-clockwise as displayed.
pub fn rotate(img: &Tensor, degrees: f64) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = img.data();
    let mut out = vec![0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let at = |yy: i64, xx: i64| -> f64 {
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        0.0
                    } else {
                        plane[yy as usize * w + xx as usize] as f64
                    }
                };
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                out[ch * h * w + y * w + x] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    Tensor::from_vec(img.shape(), out)
}

/// Draws the flip decision, then the angle uniformly from
/// `[-rotation_max, rotation_max]`. Both draws always happen so the stream
/// position does not depend on the outcome.
pub fn augment(img: &Tensor, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<Tensor> {
    let flip = rng.next_f64() < cfg.horizontal_flip_prob;
    let angle = (2.0 * rng.next_f64() - 1.0) * cfg.rotation_max_degrees;
    let mut out = if flip { flip_horizontal(img)? } else { img.clone() };
    if angle != 0.0 {
        out = rotate(&out, angle)?;
    }
    Ok(out)
}
