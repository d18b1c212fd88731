//! Single-point evaluation: per-instance IoU and accuracy, per-class
//! aggregation and classification accuracy.

mod report;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, ClassTable, InstanceMask};
use crate::error::Result;
use crate::features::FeatureMap;
use crate::grid::{assign_instance, PointGrid};
use crate::head::MaskCandidate;
use crate::mask::BinaryMask;

pub use report::{render_report, report_json};

/// What the "Acc" column measures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccuracyDef {
    /// `|P∩G| / |G|`
    #[default]
    ForegroundRecall,
    /// Fraction of all canvas pixels labelled correctly.
    PixelAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEval {
    pub instance_id: String,
    pub class: ClassId,
    pub iou: f64,
    pub acc: f64,
    pub predicted_label: Option<ClassId>,
    pub matched: bool,
}

/// IoU and accuracy of `pred` against `gt` by pixel counting.
pub fn iou_acc(pred: &BinaryMask, gt: &BinaryMask, def: AccuracyDef) -> (f64, f64) {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    let union = p + g - inter;
    let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    let acc = match def {
        AccuracyDef::ForegroundRecall => {
            if g == 0 {
                0.0
            } else {
                inter as f64 / g as f64
            }
        }
        AccuracyDef::PixelAccuracy => {
            let n = pred.len();
            if n == 0 {
                0.0
            } else {
                (n - (p + g - 2 * inter)) as f64 / n as f64
            }
        }
    };
    (iou, acc)
}

/// Scores `gt` by the most confident prediction prompted at its assigned
/// grid point. Without such a prediction the instance is unmatched and
/// scores zero.
pub fn instance_iou_acc(
    gt: &InstanceMask,
    predictions: &[MaskCandidate],
    grid: &PointGrid,
    features: &FeatureMap,
    def: AccuracyDef,
) -> Result<InstanceEval> {
    let a = assign_instance(features, gt, grid)?;
    let point = (a.grid_point[0], a.grid_point[1]);
    let mut best: Option<&MaskCandidate> = None;
    for c in predictions.iter().filter(|c| c.prompt_point == point) {
        if best.is_none_or(|b| c.predicted_iou > b.predicted_iou) {
            best = Some(c);
        }
    }
    Ok(match best {
        Some(c) => {
            let (iou, acc) = iou_acc(&c.mask, &gt.mask, def);
            InstanceEval {
                instance_id: gt.instance_id.clone(),
                class: gt.label,
                iou,
                acc,
                predicted_label: c.predicted_label(),
                matched: true,
            }
        }
        None => InstanceEval {
            instance_id: gt.instance_id.clone(),
            class: gt.label,
            iou: 0.0,
            acc: 0.0,
            predicted_label: None,
            matched: false,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub count: usize,
    pub iou: f64,
    pub acc: f64,
    pub cls_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: IndexMap<String, ClassMetrics>,
    pub miou: f64,
    pub macc: f64,
    pub mean_cls_acc: f64,
}

/// Order-independent mean: values are sorted before summing.
fn mean(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn correct(e: &InstanceEval) -> f64 {
    (e.matched && e.predicted_label == Some(e.class)) as u8 as f64
}

/// Per-class classification accuracy (unmatched counts as wrong) and its
/// unweighted mean over represented classes, in class-table order.
pub fn classification_accuracy(evals: &[InstanceEval], table: &ClassTable) -> (IndexMap<String, f64>, f64) {
    let mut per_class = IndexMap::new();
    let mut means = Vec::new();
    for id in table.ids() {
        let mut hits: Vec<f64> = evals.iter().filter(|e| e.class == id).map(correct).collect();
        if hits.is_empty() {
            continue;
        }
        let m = mean(&mut hits);
        per_class.insert(table.name(id).to_string(), m);
        means.push(m);
    }
    let overall = mean(&mut means);
    (per_class, overall)
}

/// Unweighted per-class means and class-mean aggregates over classes that
/// have at least one instance.
pub fn per_class_aggregate(evals: &[InstanceEval], table: &ClassTable) -> EvalReport {
    let mut per_class = IndexMap::new();
    let (mut ious, mut accs, mut clss) = (Vec::new(), Vec::new(), Vec::new());
    for id in table.ids() {
        let members: Vec<&InstanceEval> = evals.iter().filter(|e| e.class == id).collect();
        if members.is_empty() {
            continue;
        }
        let m = ClassMetrics {
            count: members.len(),
            iou: mean(&mut members.iter().map(|e| e.iou).collect::<Vec<_>>()),
            acc: mean(&mut members.iter().map(|e| e.acc).collect::<Vec<_>>()),
            cls_acc: mean(&mut members.iter().map(|e| correct(e)).collect::<Vec<_>>()),
        };
        ious.push(m.iou);
        accs.push(m.acc);
        clss.push(m.cls_acc);
        per_class.insert(table.name(id).to_string(), m);
    }
    EvalReport {
        per_class,
        miou: mean(&mut ious),
        macc: mean(&mut accs),
        mean_cls_acc: mean(&mut clss),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Provenance;
    use crate::grid::build_grid;

    fn ev(class: usize, iou: f64, label: Option<usize>) -> InstanceEval {
        InstanceEval {
            instance_id: format!("i{class}-{iou}"),
            class: ClassId(class),
            iou,
            acc: iou,
            predicted_label: label.map(ClassId),
            matched: label.is_some(),
        }
    }

    #[test]
    fn iou_acc_by_counting() {
        let gt = BinaryMask::from_fn(20, 20, |x, y| x < 10 && y < 10);
        let half = BinaryMask::from_fn(20, 20, |x, y| x < 5 && y < 10);
        assert_eq!(iou_acc(&gt, &gt, AccuracyDef::ForegroundRecall), (1.0, 1.0));
        assert_eq!(iou_acc(&half, &gt, AccuracyDef::ForegroundRecall), (0.5, 0.5));
        let double = BinaryMask::from_fn(20, 20, |x, y| x < 20 && y < 10);
        assert_eq!(iou_acc(&double, &gt, AccuracyDef::ForegroundRecall), (0.5, 1.0));
        // 400 px canvas, 100 wrong
        assert_eq!(iou_acc(&double, &gt, AccuracyDef::PixelAccuracy).1, 0.75);
    }

    #[test]
    fn aggregation() {
        let table = ClassTable::toy(3).unwrap();
        let r = per_class_aggregate(&[ev(0, 0.2, Some(0)), ev(0, 0.6, Some(0))], &table);
        assert!((r.per_class["Mug"].iou - 0.4).abs() < 1e-12);
        assert!((r.miou - 0.4).abs() < 1e-12);
        assert_eq!(r.per_class.len(), 1);

        let r = per_class_aggregate(&[ev(0, 0.2, None), ev(1, 0.8, None), ev(1, 0.8, None), ev(1, 0.8, None)], &table);
        assert!((r.miou - 0.5).abs() < 1e-12);

        let r = per_class_aggregate(&[], &table);
        assert!(r.per_class.is_empty());
        assert_eq!((r.miou, r.macc, r.mean_cls_acc), (0.0, 0.0, 0.0));
    }

    #[test]
    fn classification() {
        let table = ClassTable::toy(3).unwrap();
        let (per, m) = classification_accuracy(&[ev(0, 1.0, Some(0)), ev(1, 1.0, Some(1))], &table);
        assert_eq!(per.values().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
        assert_eq!(m, 1.0);
        let (per, _) = classification_accuracy(&[ev(2, 0.0, None), ev(2, 0.0, None)], &table);
        assert_eq!(per["Sofa"], 0.0);
        let (per, m) = classification_accuracy(&[ev(0, 0.5, Some(0)), ev(0, 0.5, Some(1)), ev(0, 0.5, Some(0))], &table);
        assert!((per["Mug"] - 2.0 / 3.0).abs() < 1e-12);
        assert!((m - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matching_goes_through_the_assigned_point() {
        // 2 channels; the object cells point one way, background another
        let gt_mask = BinaryMask::from_fn(8, 8, |x, y| x >= 4 && y >= 4);
        let cells: Vec<Vec<f32>> = (0..64)
            .map(|i| if gt_mask.as_slice()[i] { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
            .collect();
        let f = FeatureMap::from_cells("m", 8, 8, &cells, Provenance::ToyEncoder).unwrap();
        let grid = build_grid(4, 8, 8).unwrap();
        let gt = InstanceMask {
            instance_id: "g".into(),
            label: ClassId(1),
            mask: gt_mask.clone(),
        };
        let a = assign_instance(&f, &gt, &grid).unwrap();
        let at = (a.grid_point[0], a.grid_point[1]);
        let mk = |pred: f64, point: (f64, f64), mask: BinaryMask| MaskCandidate {
            mask,
            logits: vec![],
            predicted_iou: pred,
            prompt_point: point,
            candidate_index: 0,
            label_logits: vec![0.0, 1.0],
        };
        let preds = vec![
            mk(0.99, (1.0, 1.0), gt_mask.clone()),
            mk(0.4, at, BinaryMask::from_fn(8, 8, |x, y| x >= 6 && y >= 4)),
            mk(0.8, at, gt_mask.clone()),
        ];
        let e = instance_iou_acc(&gt, &preds, &grid, &f, AccuracyDef::ForegroundRecall).unwrap();
        assert!(e.matched);
        assert_eq!((e.iou, e.acc), (1.0, 1.0));
        assert_eq!(e.predicted_label, Some(ClassId(1)));

        let e = instance_iou_acc(&gt, &preds[..1], &grid, &f, AccuracyDef::ForegroundRecall).unwrap();
        assert!(!e.matched);
        assert_eq!((e.iou, e.acc), (0.0, 0.0));
    }
}
