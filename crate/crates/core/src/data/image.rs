//! Binary PGM/PPM codec and the resize / normalize / channel steps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    payload_at: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Decode("not a binary PGM (P5) or PPM (P6) file".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and `#` comments may separate header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n')) {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while matches!(bytes.get(pos), Some(b) if b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Decode("truncated or malformed header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode("header value out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if !matches!(bytes.get(pos), Some(b) if b.is_ascii_whitespace()) {
        return Err(Error::Decode("missing whitespace after maxval".into()));
    }
    if maxval != 255 {
        return Err(Error::Decode(format!("maxval {maxval} unsupported, need 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Decode(format!("empty image {width}x{height}")));
    }
    Ok(Header {
        channels,
        width,
        height,
        payload_at: pos + 1,
    })
}

/// Decodes to a `[c, h, w]` tensor of raw 0..255 values.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    let n = h.width * h.height * h.channels;
    let payload = bytes
        .get(h.payload_at..h.payload_at + n)
        .ok_or_else(|| Error::Decode(format!("payload shorter than {n} bytes")))?;
    let (c, plane) = (h.channels, h.width * h.height);
    let mut data = vec![0f32; n];
    for (i, &b) in payload.iter().enumerate() {
        data[(i % c) * plane + i / c] = b as f32;
    }
    Tensor::from_vec(&[c, h.height, h.width], data)
}

/// Encodes a 1- or 3-channel `[c, h, w]` tensor of 0..255 values, rounding
/// and clamping each sample.
pub fn encode_pnm(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = chw(img)?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::shape(format!("cannot encode {c} channels"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    out.reserve(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            out.push(d[ch * plane + p].round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

fn chw(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(format!("expected [c, h, w] image, got {s:?}"))),
    }
}

/// Bilinear resampling with half-pixel centres: output pixel `i` samples the
/// source at `(i + 0.5) * in / out - 0.5`, clamped to the valid range.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = chw(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize target must be non-empty"));
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                (lo, (lo + 1).min(n_in - 1), src - lo as f64)
            })
            .collect()
    };
    let (ys, xs) = (taps(h, out_h), taps(w, out_w));
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

pub fn normalize(img: &Tensor) -> Tensor {
    img.map(|v| v / 255.0)
}

/// Replicates a single grey channel to three; three-channel input passes
/// through unchanged.
pub fn to_three_channels(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(img)?;
    match c {
        3 => Ok(img.clone()),
        1 => Tensor::from_vec(&[3, h, w], img.data().repeat(3)),
        _ => Err(Error::shape(format!("expected 1 or 3 channels, got {c}"))),
    }
}

/// Decoded pixels to a `[3, out_h, out_w]` tensor in `[0, 1]`.
pub fn preprocess(pixels: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let rgb = to_three_channels(pixels)?;
    let resized = resize_bilinear(&rgb, out_h, out_w)?;
    Ok(normalize(&resized).map(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn single_red_pixel() {
        let t = decode_image(b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[255.0, 0.0, 0.0]);
    }

    #[test]
    fn grey_pair() {
        let t = decode_image(b"P5 2 1 255\n\x00\xff").unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.data(), &[0.0, 255.0]);
    }

    #[test]
    fn header_comments() {
        let t = decode_image(b"P5\n# made by hand\n1 # width\n1\n255\n\x07").unwrap();
        assert_eq!(t.data(), &[7.0]);
    }

    #[test]
    fn decode_errors() {
        for bad in [
            &b"P6\n2 2\n255\n\x00\x00\x00"[..],
            b"P3\n1 1\n255\n1 1 1",
            b"P5\n1 1\n65535\n\x00\x00",
            b"P5\n1 1\n",
            b"",
            b"P5\n0 1\n255\n",
        ] {
            assert!(matches!(decode_image(bad), Err(Error::Decode(_))), "{bad:?}");
        }
    }

    #[test]
    fn ppm_round_trip_is_byte_exact() {
        let mut rng = SeededRng::new(4);
        let (w, h) = (7, 5);
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend((0..w * h * 3).map(|_| rng.below(256) as u8));
        let t = decode_image(&bytes).unwrap();
        assert_eq!(encode_pnm(&t).unwrap(), bytes);
    }

    #[test]
    fn resize_identity_at_equal_size() {
        let mut rng = SeededRng::new(8);
        let img = Tensor::from_vec(&[3, 150, 150], (0..3 * 150 * 150).map(|_| rng.next_f32() * 255.0).collect())
            .unwrap();
        let out = resize_bilinear(&img, 150, 150).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_constant() {
        let img = Tensor::new(&[1, 13, 29], 42.0).unwrap();
        let out = resize_bilinear(&img, 150, 150).unwrap();
        assert!(out.data().iter().all(|&v| (v - 42.0).abs() < 1e-4));
    }

    #[test]
    fn two_by_two_to_one() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![0.0, 100.0, 200.0, 300.0]).unwrap();
        assert_eq!(resize_bilinear(&img, 1, 1).unwrap().data(), &[150.0]);
    }

    #[test]
    fn upsample_matches_hand_formula() {
        // 1x2 -> 1x4: source x = (i + 0.5) / 2 - 0.5 = -0.25, 0.25, 0.75, 1.25
        let img = Tensor::from_vec(&[1, 1, 2], vec![0.0, 100.0]).unwrap();
        assert_eq!(resize_bilinear(&img, 1, 4).unwrap().data(), &[0.0, 25.0, 75.0, 100.0]);
    }

    #[test]
    fn normalize_values() {
        let t = Tensor::from_vec(&[3], vec![0.0, 255.0, 128.0]).unwrap();
        let n = normalize(&t);
        assert_eq!(&n.data()[..2], &[0.0, 1.0]);
        assert!((n.data()[2] - 0.50196).abs() < 1e-5);
        let back = n.map(|v| v * 255.0);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn preprocess_shape_and_range() {
        let mut rng = SeededRng::new(2);
        for (c, h, w) in [(1, 40, 90), (3, 200, 170), (1, 1, 1)] {
            let img = Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.below(256) as f32).collect())
                .unwrap();
            let out = preprocess(&img, 150, 150).unwrap();
            assert_eq!(out.shape(), &[3, 150, 150]);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn grey_replication() {
        let g = Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(to_three_channels(&g).unwrap().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(to_three_channels(&Tensor::zeros(&[2, 1, 1]).unwrap()).is_err());
    }
}
