use std::fmt::Write as _;

use serde_json::{json, Map, Value};

use super::{ClassMetrics, EvalReport};

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn frac(v: f64) -> String {
    format!("{v:.2}")
}

fn signed_pct(v: f64) -> String {
    format!("{:+.2}", v * 100.0)
}

fn signed_frac(v: f64) -> String {
    format!("{v:+.2}")
}

/// Fixed-width table: one row per class in report order, then a mean row.
/// IoU and Acc are shown as percentages, classification accuracy as a
/// fraction. A baseline adds its values and the deltas against it.
pub fn render_report(report: &EvalReport, baseline: Option<&EvalReport>) -> String {
    let mut out = String::new();
    let mut header = format!("{:<20} {:>6} {:>8} {:>8} {:>6}", "Class", "Count", "IoU", "Acc", "Cls");
    if baseline.is_some() {
        let _ = write!(
            header,
            " | {:>8} {:>8} {:>6} | {:>8} {:>8} {:>6}",
            "base IoU", "base Acc", "Cls", "dIoU", "dAcc", "dCls"
        );
    }
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{}", "-".repeat(header.len()));

    let row = |out: &mut String, name: &str, count: usize, m: (f64, f64, f64), base: Option<(f64, f64, f64)>| {
        let _ = write!(out, "{:<20} {:>6} {:>8} {:>8} {:>6}", name, count, pct(m.0), pct(m.1), frac(m.2));
        if baseline.is_some() {
            match base {
                Some(b) => {
                    let _ = write!(
                        out,
                        " | {:>8} {:>8} {:>6} | {:>8} {:>8} {:>6}",
                        pct(b.0),
                        pct(b.1),
                        frac(b.2),
                        signed_pct(m.0 - b.0),
                        signed_pct(m.1 - b.1),
                        signed_frac(m.2 - b.2)
                    );
                }
                None => {
                    let _ = write!(out, " | {:>8} {:>8} {:>6} | {:>8} {:>8} {:>6}", "-", "-", "-", "-", "-", "-");
                }
            }
        }
        let _ = writeln!(out);
    };

    let triple = |m: &ClassMetrics| (m.iou, m.acc, m.cls_acc);
    for (name, m) in &report.per_class {
        let base = baseline.and_then(|b| b.per_class.get(name)).map(triple);
        row(&mut out, name, m.count, triple(m), base);
    }
    let _ = writeln!(out, "{}", "-".repeat(header.len()));
    let total: usize = report.per_class.values().map(|m| m.count).sum();
    row(
        &mut out,
        "mean",
        total,
        (report.miou, report.macc, report.mean_cls_acc),
        baseline.map(|b| (b.miou, b.macc, b.mean_cls_acc)),
    );
    out
}

/// JSON mirror of [`render_report`]: the report itself, plus `baseline`
/// and `delta` objects when a baseline is given.
pub fn report_json(report: &EvalReport, baseline: Option<&EvalReport>) -> Value {
    let mut v = serde_json::to_value(report).expect("report serializes");
    if let Some(b) = baseline {
        let mut per_class = Map::new();
        for (name, m) in &report.per_class {
            if let Some(bm) = b.per_class.get(name) {
                per_class.insert(
                    name.clone(),
                    json!({
                        "iou": m.iou - bm.iou,
                        "acc": m.acc - bm.acc,
                        "cls_acc": m.cls_acc - bm.cls_acc,
                    }),
                );
            }
        }
        let obj = v.as_object_mut().expect("report is an object");
        obj.insert("baseline".into(), serde_json::to_value(b).expect("report serializes"));
        obj.insert(
            "delta".into(),
            json!({
                "per_class": per_class,
                "miou": report.miou - b.miou,
                "macc": report.macc - b.macc,
                "mean_cls_acc": report.mean_cls_acc - b.mean_cls_acc,
            }),
        );
    }
    v
}
