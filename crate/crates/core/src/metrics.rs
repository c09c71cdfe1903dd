//! Confusion matrix, headline metrics and ROC / AUC. The positive class is
//! Pneumonia (label 1).

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tp: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn merge(&self, other: &ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tp: self.tp + other.tp,
        }
    }
}

fn check_labels(pairs: &[(f64, u8)]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    if let Some((_, y)) = pairs.iter().find(|(_, y)| *y > 1) {
        return Err(Error::Label(format!("label {y} is not 0 or 1")));
    }
    Ok(())
}

/// Predicts positive iff `p >= threshold`.
pub fn confusion_from_predictions(pairs: &[(f64, u8)], threshold: f64) -> Result<ConfusionMatrix> {
    check_labels(pairs)?;
    let mut cm = ConfusionMatrix::default();
    for &(p, y) in pairs {
        match (p >= threshold, y == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Undefined ratios (0/0) are reported as 0 with the matching flag set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    if cm.total() == 0 {
        return Err(Error::Data("confusion matrix is empty".into()));
    }
    let (accuracy, _) = ratio(cm.tp + cm.tn, cm.total());
    let (precision, precision_undefined) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, recall_undefined) = ratio(cm.tp, cm.tp + cm.fn_);
    // 2PR / (P + R) written in counts: 2tp / (2tp + fp + fn)
    let (f1, f1_undefined) = if precision + recall == 0.0 {
        (0.0, true)
    } else {
        ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_)
    };
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
        f1_undefined,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Score threshold reached at each point; the first is `+inf`.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// Sweeps the threshold down through every distinct score; tied scores move
/// the curve diagonally, which makes the trapezoid area equal to the
/// Mann-Whitney statistic with ties counted one half.
pub fn roc_auc(pairs: &[(f64, u8)]) -> Result<RocCurve> {
    check_labels(pairs)?;
    let pos = pairs.iter().filter(|(_, y)| *y == 1).count() as f64;
    let neg = pairs.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Data("ROC needs both positive and negative labels".into()));
    }
    if pairs.iter().any(|(p, _)| p.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut auc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (x0, y0) = *points.last().expect("non-empty");
        let (x1, y1) = (fp / neg, tp / pos);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
        thresholds.push(t);
    }
    Ok(RocCurve { points, thresholds, auc })
}
