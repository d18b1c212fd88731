//! Everything-mode output filtering: predicted-IoU threshold, small-region
//! cleanup and greedy box NMS.

mod count;
mod regions;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::MaskCandidate;

pub use count::{count_masks, MaskCountReport, PipelineCount};
pub use regions::{clean_regions, components};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub pred_iou_threshold: f64,
    /// Values above 1 disable suppression.
    pub box_iou_cutoff: f64,
    pub min_region_area: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            pred_iou_threshold: 0.3,
            box_iou_cutoff: 0.3,
            min_region_area: 150,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pred_iou_threshold) {
            return Err(Error::arg(format!(
                "pred-iou threshold {} must lie in [0, 1]",
                self.pred_iou_threshold
            )));
        }
        if self.box_iou_cutoff.is_nan() || self.box_iou_cutoff < 0.0 {
            return Err(Error::arg(format!(
                "box IoU cutoff {} must be >= 0",
                self.box_iou_cutoff
            )));
        }
        Ok(())
    }
}

pub fn threshold_by_pred_iou(candidates: Vec<MaskCandidate>, threshold: f64) -> Vec<MaskCandidate> {
    candidates
        .into_iter()
        .filter(|c| c.predicted_iou >= threshold)
        .collect()
}

/// Greedy suppression over tight mask boxes. Candidates are visited by
/// predicted IoU (descending), then larger area, then input order; one is
/// kept iff its box IoU with every kept box is below `cutoff`. Output is in
/// visiting order. Empty masks have no box and are dropped.
pub fn box_nms(candidates: Vec<MaskCandidate>, cutoff: f64) -> Vec<MaskCandidate> {
    let mut items: Vec<(usize, usize, MaskCandidate)> = candidates
        .into_iter()
        .enumerate()
        .filter(|(_, c)| !c.mask.is_empty())
        .map(|(i, c)| (i, c.mask.area(), c))
        .collect();
    items.sort_by(|a, b| {
        b.2.predicted_iou
            .partial_cmp(&a.2.predicted_iou)
            .unwrap_or(Ordering::Equal)
            .then(b.1.cmp(&a.1))
            .then(a.0.cmp(&b.0))
    });
    let mut kept: Vec<MaskCandidate> = Vec::new();
    let mut boxes = Vec::new();
    for (_, _, c) in items {
        let b = c.mask.bbox().expect("non-empty mask has a box");
        if boxes.iter().all(|k: &crate::mask::BoxXyxy| k.iou(&b) < cutoff) {
            boxes.push(b);
            kept.push(c);
        }
    }
    kept
}

/// The per-candidate stages: threshold, drop empties, clean regions, drop
/// masks the cleanup emptied. Order is preserved.
pub fn prefilter(candidates: Vec<MaskCandidate>, config: &FilterConfig) -> Vec<MaskCandidate> {
    threshold_by_pred_iou(candidates, config.pred_iou_threshold)
        .into_iter()
        .filter(|c| !c.mask.is_empty())
        .map(|mut c| {
            c.mask = clean_regions(&c.mask, config.min_region_area);
            c
        })
        .filter(|c| !c.mask.is_empty())
        .collect()
}

/// Threshold, drop empties, clean regions, drop emptied, then box NMS.
pub fn run_pipeline(candidates: Vec<MaskCandidate>, config: &FilterConfig) -> Vec<MaskCandidate> {
    box_nms(prefilter(candidates, config), config.box_iou_cutoff)
}
