use crate::error::{Error, Result};
use crate::rng::SeededRng;

use super::Manifest;

/// Distributes `n` items over `ratios` by largest remainder: floors first,
/// then one extra item each to the largest fractional parts (earlier subset
/// wins ties).
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r).collect();
    // absorb representation error such as 10 * 0.7 = 6.999999999999999
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    let frac = |i: usize| exact[i] - counts[i] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Stratified split into (train, val, test). Each class is shuffled with its
/// own seeded stream and sliced contiguously; every subset keeps the
/// original manifest order.
pub fn split_dataset(m: &Manifest, ratios: [f64; 3], seed: u64) -> Result<[Manifest; 3]> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let mut assignment = vec![0usize; m.len()];
    for class in 0..2u8 {
        let mut idx: Vec<usize> = (0..m.len()).filter(|&i| m.records[i].label == class).collect();
        if idx.len() < 3 {
            return Err(Error::Config(format!(
                "class {} has {} samples, need at least 3",
                super::label_name(class),
                idx.len()
            )));
        }
        SeededRng::derive(seed, class as u64).shuffle(&mut idx);
        let counts = largest_remainder(idx.len(), &ratios);
        let mut start = 0;
        for (subset, &n) in counts.iter().enumerate() {
            for &i in &idx[start..start + n] {
                assignment[i] = subset;
            }
            start += n;
        }
    }
    let mut out: [Manifest; 3] = std::array::from_fn(|_| Manifest {
        records: Vec::new(),
        source: m.source.clone(),
    });
    for (rec, &subset) in m.records.iter().zip(&assignment) {
        out[subset].records.push(rec.clone());
    }
    Ok(out)
}
