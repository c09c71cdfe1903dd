//! Desk-scale synthetic chest images: a dark field with a pair of bright
//! "lung" ellipses; the pneumonia class adds bright blotches inside the
//! lungs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::{encode_pnm, Manifest, SampleRecord, IMAGE_SIZE};

fn base_image(size: usize, rng: &mut SeededRng) -> Vec<f64> {
    let s = size as f64;
    let jitter = |rng: &mut SeededRng| 1.0 + 0.1 * (rng.next_f64() - 0.5);
    let (ry, rx) = (0.32 * s * jitter(rng), 0.15 * s * jitter(rng));
    let centres = [(0.5 * s, 0.3 * s), (0.5 * s, 0.7 * s)];
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let inside = centres.iter().any(|&(cy, cx)| {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                dy * dy + dx * dx <= 1.0
            });
            let noise = rng.next_f64();
            px.push(if inside { 95.0 + 15.0 * noise } else { 15.0 + 15.0 * noise });
        }
    }
    px
}

fn add_blotches(px: &mut [f64], size: usize, rng: &mut SeededRng) {
    let s = size as f64;
    let count = 3 + rng.below(3);
    for _ in 0..count {
        let cx = if rng.below(2) == 0 { 0.3 * s } else { 0.7 * s };
        let cx = cx + (rng.next_f64() - 0.5) * 0.12 * s;
        let cy = 0.5 * s + (rng.next_f64() - 0.5) * 0.4 * s;
        let sigma = (0.04 + 0.03 * rng.next_f64()) * s;
        let amp = 90.0 + 40.0 * rng.next_f64();
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                px[y * size + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
}

/// `2 * n_per_class` records with `[3, size, size]` pixel tensors (0..255,
/// grey replicated to RGB). Pair `i` shares its base image across classes.
pub fn synth_samples(n_per_class: usize, seed: u64, size: usize) -> Result<Vec<(SampleRecord, Tensor)>> {
    if n_per_class == 0 || size == 0 {
        return Err(Error::Config("synthetic set needs n_per_class >= 1 and a non-empty size".into()));
    }
    let mut out: Vec<(SampleRecord, Tensor)> = Vec::with_capacity(2 * n_per_class);
    let mut pneumonia = Vec::with_capacity(n_per_class);
    for i in 0..n_per_class {
        let mut base_rng = SeededRng::derive(seed, 2 * i as u64);
        let base = base_image(size, &mut base_rng);
        let mut sick = base.clone();
        add_blotches(&mut sick, size, &mut SeededRng::derive(seed, 2 * i as u64 + 1));
        for (label, px) in [(0u8, base), (1, sick)] {
            let grey: Vec<f32> = px.iter().map(|v| v.round().clamp(0.0, 255.0) as f32).collect();
            let img = Tensor::from_vec(&[3, size, size], grey.repeat(3))?;
            let rec = SampleRecord {
                image_path: format!("{}_{i:03}.ppm", if label == 1 { "pneumonia" } else { "normal" }),
                label,
                age_months: Some(1 + base_rng.below(180)),
                metadata: vec![("fever".into(), if label == 1 { "yes" } else { "no" }.into())],
            };
            if label == 1 {
                pneumonia.push((rec, img));
            } else {
                out.push((rec, img));
            }
        }
    }
    out.extend(pneumonia);
    Ok(out)
}

/// Writes `n_per_class` images per class plus `manifest.csv` into `dir`.
pub fn synth_dataset(n_per_class: usize, seed: u64, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::new();
    for (rec, img) in synth_samples(n_per_class, seed, IMAGE_SIZE)? {
        let path = dir.join(&rec.image_path);
        std::fs::write(&path, encode_pnm(&img)?).map_err(|e| Error::io(&path, e))?;
        records.push(rec);
    }
    let source = dir.join("manifest.csv");
    let m = Manifest { records, source };
    std::fs::write(&m.source, m.to_text()).map_err(|e| Error::io(&m.source, e))?;
    Ok(m)
}
