//! CSV and SVG report files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport, RocCurve};
use crate::train::EpochLog;

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr";

/// One row per epoch. Losses and accuracies use 6 decimals; the learning
/// rate uses 6 decimals of scientific notation so small rates survive.
pub fn history_csv(logs: &[EpochLog]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for l in logs {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6e}",
            l.epoch, l.train_loss, l.train_accuracy, l.val_loss, l.val_accuracy, l.learning_rate
        );
    }
    s
}

pub fn parse_history(text: &str) -> Result<Vec<EpochLog>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HISTORY_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing history header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let err = |msg: &str| Error::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(err("expected 6 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| err("bad epoch"))?,
                train_loss: num(f[1])?,
                train_accuracy: num(f[2])?,
                val_loss: num(f[3])?,
                val_accuracy: num(f[4])?,
                learning_rate: num(f[5])?,
            })
        })
        .collect()
}

pub fn metrics_csv(cm: &ConfusionMatrix, m: &MetricsReport) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in [("tn", cm.tn), ("fp", cm.fp), ("fn", cm.fn_), ("tp", cm.tp)] {
        let _ = writeln!(s, "{k},{v}");
    }
    for (k, v) in [
        ("accuracy", m.accuracy),
        ("precision", m.precision),
        ("recall", m.recall),
        ("f1", m.f1),
    ] {
        let _ = writeln!(s, "{k},{v:.6}");
    }
    for (k, v) in [
        ("precision_undefined", m.precision_undefined),
        ("recall_undefined", m.recall_undefined),
        ("f1_undefined", m.f1_undefined),
    ] {
        let _ = writeln!(s, "{k},{}", v as u8);
    }
    s
}

pub fn roc_csv(roc: &RocCurve) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for (t, (x, y)) in roc.thresholds.iter().zip(&roc.points) {
        let _ = writeln!(s, "{t:.6},{x:.6},{y:.6}");
    }
    let _ = writeln!(s, "# auc,{:.6}", roc.auc);
    s
}

const W: f64 = 800.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;

struct Series<'a> {
    name: &'a str,
    colour: &'a str,
    points: Vec<(f64, f64)>,
}

fn chart(svg: &mut String, top: f64, title: &str, x_label: &str, y_label: &str, series: &[Series], x_range: (f64, f64), y_range: (f64, f64)) {
    let (x0, x1) = x_range;
    let (y0, mut y1) = y_range;
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let x_span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |x: f64| MARGIN + (x - x0) / x_span * (W - 2.0 * MARGIN);
    let py = |y: f64| top + H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let _ = writeln!(svg, r#"<g class="chart">"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="16">{title}</text>"#,
        W / 2.0,
        top + 30.0
    );
    let (left, right, bottom, upper) = (MARGIN, W - MARGIN, top + H - MARGIN, top + MARGIN);
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{bottom}" x2="{left}" y2="{upper}" stroke="black"/>"#);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * x_span, y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{xv:.2}</text>"#,
            px(xv),
            bottom + 16.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{yv:.3}</text>"#,
            left - 6.0,
            py(yv) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{x_label}</text>"#,
        W / 2.0,
        top + H - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{y}" text-anchor="middle" font-size="13" transform="rotate(-90 15 {y})">{y_label}</text>"#,
        y = top + H / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            s.colour,
            pts.join(" ")
        );
        let ly = upper + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"/>"#,
            right - 140.0,
            right - 115.0,
            s.colour
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12">{}</text>"#,
            right - 108.0,
            ly + 4.0,
            s.name
        );
    }
    let _ = writeln!(svg, "</g>");
}

/// Accuracy and loss against epoch (train and validation), plus the ROC
/// curve when one is given. Each chart is 800x400.
pub fn curves_svg(logs: &[EpochLog], roc: Option<&RocCurve>) -> String {
    let charts = if roc.is_some() { 3.0 } else { 2.0 };
    let mut svg = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{}\" viewBox=\"0 0 {W} {}\">\n",
        H * charts,
        H * charts
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let last = logs.last().map_or(1.0, |l| l.epoch as f64);
    let first = logs.first().map_or(0.0, |l| l.epoch as f64);
    let series = |name, colour, f: fn(&EpochLog) -> f64| Series {
        name,
        colour,
        points: logs.iter().map(|l| (l.epoch as f64, f(l))).collect(),
    };
    chart(
        &mut svg,
        0.0,
        "Accuracy",
        "epoch",
        "accuracy",
        &[series("train", "#1f77b4", |l| l.train_accuracy), series("validation", "#ff7f0e", |l| l.val_accuracy)],
        (first, last),
        (0.0, 1.0),
    );
    let max_loss = logs
        .iter()
        .flat_map(|l| [l.train_loss, l.val_loss])
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    chart(
        &mut svg,
        H,
        "Loss",
        "epoch",
        "binary cross-entropy",
        &[series("train", "#1f77b4", |l| l.train_loss), series("validation", "#ff7f0e", |l| l.val_loss)],
        (first, last),
        (0.0, max_loss * 1.05),
    );
    if let Some(roc) = roc {
        chart(
            &mut svg,
            2.0 * H,
            &format!("ROC (AUC {:.4})", roc.auc),
            "false positive rate",
            "true positive rate",
            &[
                Series {
                    name: "model",
                    colour: "#2ca02c",
                    points: roc.points.clone(),
                },
                Series {
                    name: "chance",
                    colour: "#999999",
                    points: vec![(0.0, 0.0), (1.0, 1.0)],
                },
            ],
            (0.0, 1.0),
            (0.0, 1.0),
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

pub fn write_history(dir: &Path, logs: &[EpochLog], roc: Option<&RocCurve>) -> Result<()> {
    write(dir, "history.csv", &history_csv(logs))?;
    write(dir, "curves.svg", &curves_svg(logs, roc))
}

pub fn write_evaluation(dir: &Path, cm: &ConfusionMatrix, m: &MetricsReport, roc: Option<&RocCurve>) -> Result<()> {
    write(dir, "metrics.csv", &metrics_csv(cm, m))?;
    if let Some(roc) = roc {
        write(dir, "roc.csv", &roc_csv(roc))?;
    }
    Ok(())
}

/// Writes history.csv, metrics.csv, roc.csv and curves.svg into `dir`.
pub fn render_report(logs: &[EpochLog], cm: &ConfusionMatrix, m: &MetricsReport, roc: &RocCurve, dir: &Path) -> Result<()> {
    if logs.is_empty() {
        return Err(Error::Data("no epochs to report".into()));
    }
    write_history(dir, logs, Some(roc))?;
    write_evaluation(dir, cm, m, Some(roc))
}
