use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, iou_features, pixel_cells, pool_over, sigmoid, AdamW, ToyHead, NUM_CANDIDATES};
use crate::dataset::{ClassId, InstanceMask, Manifest};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureProvider};
use crate::fsutil;
use crate::grid::Assignment;
use crate::head::cosine_lr;
use crate::losses::{cross_entropy, dice_loss, focal_loss, LossReport, LossWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            loss_weights: LossWeights::default(),
            focal_alpha: crate::losses::FOCAL_ALPHA,
            focal_gamma: crate::losses::FOCAL_GAMMA,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::arg(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_ce: f64,
    pub mean_focal: f64,
    pub mean_dice: f64,
    pub mean_total: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(e)?;
        }
        if self.epochs.is_empty() {
            w.write_record(["epoch", "mean_ce", "mean_focal", "mean_dice", "mean_total", "learning_rate"])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::arg(format!("csv flush: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let epochs = r.deserialize().collect::<std::result::Result<Vec<EpochLog>, _>>()?;
        Ok(Self { epochs })
    }

    pub fn first(&self) -> Option<&EpochLog> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }
}

/// Loss terms and full parameter gradient for one (image, mask) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradient {
    pub report: LossReport,
    /// Squared error of the IoU head, trained alongside but not logged.
    pub iou_loss: f64,
    pub grad: Vec<f64>,
    pub selected: usize,
}

/// Forward and backward pass for the prompt at `point` against `gt`.
///
/// The best of the three candidates by IoU with `gt` receives the focal and
/// dice terms; the classifier sees features pooled on that candidate's hard
/// mask; the IoU head regresses all three true IoUs.
#[allow(clippy::too_many_arguments)]
pub fn pair_gradient(
    head: &ToyHead,
    features: &FeatureMap,
    cells: &[usize],
    canvas: (u32, u32),
    point: (f64, f64),
    gt: &InstanceMask,
    label: ClassId,
    cfg: &TrainConfig,
) -> Result<PairGradient> {
    let c = head.channels();
    let k_classes = head.classes();
    if features.channels() != c {
        return Err(Error::arg(format!(
            "head expects {c} channels, `{}` has {}",
            features.image_id,
            features.channels()
        )));
    }
    let (w, h) = canvas;
    if gt.mask.dims() != canvas {
        return Err(Error::arg(format!("mask `{}` does not match the canvas", gt.instance_id)));
    }
    let (x, y) = point;
    if !(x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64) {
        return Err(Error::arg(format!("prompt ({x}, {y}) lies outside the canvas")));
    }
    let g = gt.mask.as_slice();
    let pcell = features.cell_of_pixel(x as u32, y as u32, w, h);
    let fp = features.cell(pcell);
    let v = head.prompt_vector(features, pcell);
    let scores = head.cell_scores(features, &v);
    let base: Vec<f64> = cells.iter().map(|&cell| scores[cell]).collect();

    let mut ious = [0.0; NUM_CANDIDATES];
    for (k, iou) in ious.iter_mut().enumerate() {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&s, &gv) in base.iter().zip(g) {
            let on = s + head.offsets[k] > 0.0;
            inter += (on && gv) as usize;
            union += (on || gv) as usize;
        }
        *iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    }
    let sel = argmax(&ious).unwrap_or(0);

    let o_off = c * c;
    let o_iw = o_off + NUM_CANDIDATES;
    let o_ib = o_iw + 2 * NUM_CANDIDATES;
    let o_cw = o_ib + NUM_CANDIDATES;
    let o_cb = o_cw + k_classes * c;
    let mut grad = vec![0.0; head.param_count()];
    let wts = cfg.loss_weights;

    // mask path
    let z: Vec<f64> = base.iter().map(|s| s + head.offsets[sel]).collect();
    let probs: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
    let (focal, gf) = focal_loss(&probs, g, cfg.focal_alpha, cfg.focal_gamma)?;
    let (dice, gd) = dice_loss(&probs, g)?;
    let mut g_cell = vec![0.0; features.cell_count()];
    let mut db = 0.0;
    for u in 0..z.len() {
        let dz = (wts.focal * gf[u] + wts.dice * gd[u]) * probs[u] * (1.0 - probs[u]);
        g_cell[cells[u]] += dz;
        db += dz;
    }
    grad[o_off + sel] = db;
    for i in 0..c {
        let a_i: f64 = g_cell
            .iter()
            .zip(features.plane(i))
            .map(|(&gc, &f)| gc * f as f64)
            .sum();
        for j in 0..c {
            grad[i * c + j] = a_i * fp[j];
        }
    }

    // classifier path
    let hard: Vec<bool> = z.iter().map(|&v| v > 0.0).collect();
    let pooled = pool_over(features, cells, &hard);
    let logits = head.class_logits(&pooled);
    let (ce, gce) = cross_entropy(&logits, label.0)?;
    for k in 0..k_classes {
        grad[o_cb + k] = wts.ce * gce[k];
        for j in 0..c {
            grad[o_cw + k * c + j] = wts.ce * gce[k] * pooled[j];
        }
    }

    // IoU head, regressed on every candidate
    let mut iou_loss = 0.0;
    for (k, &target) in ious.iter().enumerate() {
        let zk: Vec<f64> = base.iter().map(|s| s + head.offsets[k]).collect();
        let xk = iou_features(&zk);
        let pred = head.predicted_iou(k, xk);
        let e = pred - target;
        iou_loss += e * e / NUM_CANDIDATES as f64;
        let dpre = 2.0 * e / NUM_CANDIDATES as f64 * pred * (1.0 - pred);
        grad[o_iw + 2 * k] = dpre * xk[0];
        grad[o_iw + 2 * k + 1] = dpre * xk[1];
        grad[o_ib + k] = dpre;
    }

    Ok(PairGradient {
        report: LossReport::new(ce, focal, dice, wts),
        iou_loss,
        grad,
        selected: sel,
    })
}

struct Pair<'a> {
    image: usize,
    gt: &'a InstanceMask,
    point: (f64, f64),
}

/// Fine-tunes a copy of `head` with one optimizer step per (image, mask)
/// pair, visiting pairs in a seeded shuffled order each epoch.
pub fn train(
    head: &ToyHead,
    manifest: &Manifest,
    assignments: &[Assignment],
    features: &dyn FeatureProvider,
    config: &TrainConfig,
) -> Result<(ToyHead, TrainLog)> {
    config.validate()?;
    if head.classes() != manifest.class_table.len() {
        return Err(Error::arg(format!(
            "head has {} classes, class table has {}",
            head.classes(),
            manifest.class_table.len()
        )));
    }
    let by_id: HashMap<&str, &Assignment> = assignments
        .iter()
        .map(|a| (a.instance_id.as_str(), a))
        .collect();
    let known: HashSet<&str> = manifest
        .images
        .iter()
        .flat_map(|i| i.instances())
        .map(|m| m.instance_id.as_str())
        .collect();
    if let Some(a) = assignments.iter().find(|a| !known.contains(a.instance_id.as_str())) {
        return Err(Error::invalid(format!(
            "assignment references unknown instance `{}`",
            a.instance_id
        )));
    }

    let mut maps: Vec<Arc<FeatureMap>> = Vec::with_capacity(manifest.images.len());
    let mut cells: Vec<Vec<usize>> = Vec::with_capacity(manifest.images.len());
    let mut pairs = Vec::new();
    for (i, img) in manifest.images.iter().enumerate() {
        let f = features.features(&img.frame)?;
        cells.push(pixel_cells(&f, img.frame.width(), img.frame.height()));
        maps.push(f);
        for m in img.instances() {
            let a = by_id.get(m.instance_id.as_str()).ok_or_else(|| {
                Error::invalid(format!("no assignment for instance `{}`", m.instance_id))
            })?;
            pairs.push(Pair {
                image: i,
                gt: m,
                point: (a.grid_point[0], a.grid_point[1]),
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid("manifest has no masks to train on"));
    }

    let mut head = head.clone();
    let mut params = head.params();
    let mut opt = AdamW::new(params.len(), config.beta1, config.beta2, config.eps, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = TrainLog::default();
    let mut reports = vec![None; pairs.len()];

    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.learning_rate, epoch, config.epochs);
        order.shuffle(&mut rng);
        for &pi in &order {
            let p = &pairs[pi];
            let img = &manifest.images[p.image];
            let canvas = (img.frame.width(), img.frame.height());
            let label = p.gt.label;
            let pg = pair_gradient(&head, &maps[p.image], &cells[p.image], canvas, p.point, p.gt, label, config)?;
            opt.step(&mut params, &pg.grad, lr);
            head.set_params(&params);
            reports[pi] = Some(pg.report);
        }
        // summed in pair order so the mean does not depend on the shuffle
        let n = pairs.len() as f64;
        let (mut ce, mut fo, mut di, mut to) = (0.0, 0.0, 0.0, 0.0);
        for r in reports.iter().flatten() {
            ce += r.ce;
            fo += r.focal;
            di += r.dice;
            to += r.total;
        }
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            mean_ce: ce / n,
            mean_focal: fo / n,
            mean_dice: di / n,
            mean_total: to / n,
            learning_rate: lr,
        });
        log::debug!("epoch {} lr {lr:.3e} loss {:.5}", epoch + 1, to / n);
    }
    Ok((head, log))
}
