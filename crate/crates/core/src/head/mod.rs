//! Point-conditioned toy mask decoder with an IoU head and a classifier.
//!
//! For a prompt at feature cell `p`, candidate `k` scores canvas pixel `u`
//! as `f(c(u))ᵀ W f(p) + b_k`, where `c(u)` is the feature cell under `u`.
//! Predicted IoU is `σ(w_k · (mean positive logit, fg fraction) + d_k)` and
//! the classifier is affine over features pooled on a candidate mask.

mod optim;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{ClassId, InstanceMask};
use crate::error::{Error, Result};
use crate::featfile::{self, Tensor};
use crate::features::FeatureMap;
use crate::fsutil;
use crate::mask::BinaryMask;

pub use optim::{cosine_lr, AdamW};
pub use train::{train, EpochLog, TrainConfig, TrainLog};

pub const NUM_CANDIDATES: usize = 3;

/// Standard deviation of the gaussian used for fresh bilinear and class weights.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyHead {
    channels: usize,
    classes: usize,
    /// `channels × channels`, row-major.
    pub bilinear: Vec<f64>,
    pub offsets: [f64; NUM_CANDIDATES],
    pub iou_weights: [[f64; 2]; NUM_CANDIDATES],
    pub iou_bias: [f64; NUM_CANDIDATES],
    /// `classes × channels`, row-major.
    pub class_weights: Vec<f64>,
    pub class_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskCandidate {
    pub mask: BinaryMask,
    /// Canvas-resolution logits; emptied by [`MaskCandidate::release_logits`].
    pub logits: Vec<f32>,
    pub predicted_iou: f64,
    pub prompt_point: (f64, f64),
    pub candidate_index: usize,
    pub label_logits: Vec<f64>,
}

impl MaskCandidate {
    pub fn release_logits(&mut self) {
        self.logits = Vec::new();
    }

    pub fn predicted_label(&self) -> Option<ClassId> {
        argmax(&self.label_logits).map(ClassId)
    }
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inputs to the IoU head: mean of the positive logits (0 if none) and the
/// foreground fraction.
pub(crate) fn iou_features(logits: &[f64]) -> [f64; 2] {
    let (mut sum, mut n) = (0.0, 0usize);
    for &z in logits {
        if z > 0.0 {
            sum += z;
            n += 1;
        }
    }
    let mpl = if n > 0 { sum / n as f64 } else { 0.0 };
    [mpl, n as f64 / logits.len().max(1) as f64]
}

/// Per-pixel feature cell index for a canvas.
pub(crate) fn pixel_cells(features: &FeatureMap, canvas_w: u32, canvas_h: u32) -> Vec<usize> {
    let cols: Vec<usize> = (0..canvas_w)
        .map(|x| (x as usize * features.width() / canvas_w as usize).min(features.width() - 1))
        .collect();
    let mut out = Vec::with_capacity((canvas_w * canvas_h) as usize);
    for y in 0..canvas_h {
        let row = (y as usize * features.height() / canvas_h as usize).min(features.height() - 1);
        out.extend(cols.iter().map(|&c| row * features.width() + c));
    }
    out
}

impl ToyHead {
    pub fn zeros(channels: usize, classes: usize) -> Self {
        Self {
            channels,
            classes,
            bilinear: vec![0.0; channels * channels],
            offsets: [0.0; NUM_CANDIDATES],
            iou_weights: [[0.0; 2]; NUM_CANDIDATES],
            iou_bias: [0.0; NUM_CANDIDATES],
            class_weights: vec![0.0; classes * channels],
            class_bias: vec![0.0; classes],
        }
    }

    /// Gaussian bilinear and class weights with std [`INIT_SCALE`]; every
    /// other parameter starts at zero.
    pub fn random(channels: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_SCALE).expect("valid std");
        let mut head = Self::zeros(channels, classes);
        head.bilinear.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        head.class_weights.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        head
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_count(&self) -> usize {
        self.channels * self.channels
            + NUM_CANDIDATES
            + 3 * NUM_CANDIDATES
            + self.classes * self.channels
            + self.classes
    }

    /// Flat parameter vector in a fixed order: bilinear, offsets, IoU
    /// weights, IoU bias, class weights, class bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend_from_slice(&self.bilinear);
        p.extend_from_slice(&self.offsets);
        for w in &self.iou_weights {
            p.extend_from_slice(w);
        }
        p.extend_from_slice(&self.iou_bias);
        p.extend_from_slice(&self.class_weights);
        p.extend_from_slice(&self.class_bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count());
        let mut it = p.iter().copied();
        self.bilinear.iter_mut().for_each(|w| *w = it.next().unwrap());
        self.offsets.iter_mut().for_each(|w| *w = it.next().unwrap());
        for w in &mut self.iou_weights {
            w.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        self.iou_bias.iter_mut().for_each(|w| *w = it.next().unwrap());
        self.class_weights.iter_mut().for_each(|w| *w = it.next().unwrap());
        self.class_bias.iter_mut().for_each(|w| *w = it.next().unwrap());
    }

    fn check_features(&self, features: &FeatureMap) -> Result<()> {
        if features.channels() != self.channels {
            return Err(Error::arg(format!(
                "head expects {} feature channels, `{}` has {}",
                self.channels,
                features.image_id,
                features.channels()
            )));
        }
        Ok(())
    }

    /// `W f(p)` for the feature cell under `point`.
    pub(crate) fn prompt_vector(&self, features: &FeatureMap, point_cell: usize) -> Vec<f64> {
        let fp = features.cell(point_cell);
        let c = self.channels;
        (0..c)
            .map(|i| (0..c).map(|j| self.bilinear[i * c + j] * fp[j]).sum())
            .collect()
    }

    /// Bilinear score of every feature cell against the prompt vector.
    pub(crate) fn cell_scores(&self, features: &FeatureMap, v: &[f64]) -> Vec<f64> {
        let n = features.cell_count();
        let mut s = vec![0.0; n];
        for (k, &vk) in v.iter().enumerate() {
            if vk == 0.0 {
                continue;
            }
            for (out, &f) in s.iter_mut().zip(features.plane(k)) {
                *out += f as f64 * vk;
            }
        }
        s
    }

    pub(crate) fn predicted_iou(&self, k: usize, x: [f64; 2]) -> f64 {
        let w = self.iou_weights[k];
        sigmoid(w[0] * x[0] + w[1] * x[1] + self.iou_bias[k])
    }

    /// Mean feature vector over the mask's pixels; zeros for an empty mask.
    pub fn pooled_features(&self, features: &FeatureMap, mask: &BinaryMask) -> Vec<f64> {
        let cells = pixel_cells(features, mask.width(), mask.height());
        pool_over(features, &cells, mask.as_slice())
    }

    pub fn class_logits(&self, pooled: &[f64]) -> Vec<f64> {
        let c = self.channels;
        (0..self.classes)
            .map(|k| {
                self.class_bias[k]
                    + (0..c).map(|j| self.class_weights[k * c + j] * pooled[j]).sum::<f64>()
            })
            .collect()
    }

    /// Three candidates for a prompt at `point` on a `canvas_w`×`canvas_h`
    /// canvas. All three share the label logits of the candidate with the
    /// highest predicted IoU.
    pub fn predict_candidates(
        &self,
        features: &FeatureMap,
        canvas_w: u32,
        canvas_h: u32,
        point: (f64, f64),
    ) -> Result<Vec<MaskCandidate>> {
        let cells = pixel_cells(features, canvas_w, canvas_h);
        self.predict_with_cells(features, &cells, canvas_w, canvas_h, point)
    }

    pub(crate) fn predict_with_cells(
        &self,
        features: &FeatureMap,
        cells: &[usize],
        canvas_w: u32,
        canvas_h: u32,
        point: (f64, f64),
    ) -> Result<Vec<MaskCandidate>> {
        self.check_features(features)?;
        let (x, y) = point;
        if !(x >= 0.0 && x < canvas_w as f64 && y >= 0.0 && y < canvas_h as f64) {
            return Err(Error::arg(format!(
                "prompt ({x}, {y}) lies outside the {canvas_w}x{canvas_h} canvas"
            )));
        }
        let pcell = features.cell_of_pixel(x as u32, y as u32, canvas_w, canvas_h);
        let v = self.prompt_vector(features, pcell);
        let scores = self.cell_scores(features, &v);
        let base: Vec<f64> = cells.iter().map(|&c| scores[c]).collect();

        let mut out = Vec::with_capacity(NUM_CANDIDATES);
        for k in 0..NUM_CANDIDATES {
            let z: Vec<f64> = base.iter().map(|s| s + self.offsets[k]).collect();
            let pred = self.predicted_iou(k, iou_features(&z));
            let mask = BinaryMask::from_vec(canvas_w, canvas_h, z.iter().map(|&v| v > 0.0).collect());
            out.push(MaskCandidate {
                mask,
                logits: z.iter().map(|&v| v as f32).collect(),
                predicted_iou: pred,
                prompt_point: point,
                candidate_index: k,
                label_logits: Vec::new(),
            });
        }
        let preds: Vec<f64> = out.iter().map(|c| c.predicted_iou).collect();
        let top = argmax(&preds).unwrap_or(0);
        let pooled = pool_over(features, cells, out[top].mask.as_slice());
        let label_logits = self.class_logits(&pooled);
        for c in &mut out {
            c.label_logits = label_logits.clone();
        }
        Ok(out)
    }

    /// Class with the largest logit over features pooled on the mask.
    pub fn classify(&self, features: &FeatureMap, mask: &BinaryMask) -> ClassId {
        let logits = self.class_logits(&self.pooled_features(features, mask));
        ClassId(argmax(&logits).unwrap_or(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = self.channels as u32;
        let k = self.classes as u32;
        let n = NUM_CANDIDATES as u32;
        let iou_w: Vec<f64> = self.iou_weights.iter().flatten().copied().collect();
        let sections = vec![
            ("bilinear".to_string(), Tensor::from_f64(vec![c, c], &self.bilinear)?),
            ("offsets".to_string(), Tensor::from_f64(vec![n], &self.offsets)?),
            ("iou_weights".to_string(), Tensor::from_f64(vec![n, 2], &iou_w)?),
            ("iou_bias".to_string(), Tensor::from_f64(vec![n], &self.iou_bias)?),
            ("class_weights".to_string(), Tensor::from_f64(vec![k, c], &self.class_weights)?),
            ("class_bias".to_string(), Tensor::from_f64(vec![k], &self.class_bias)?),
        ];
        fsutil::write_atomic(path, &featfile::encode_archive(&sections))
    }

    /// Loads a checkpoint. Parameters are stored as f32, so a reloaded head
    /// equals the saved one rounded to single precision.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let sections = featfile::decode_archive(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let get = |name: &str| -> Result<&Tensor> {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint {} lacks section `{name}`", path.display())))
        };
        let bil = get("bilinear")?;
        let cw = get("class_weights")?;
        if bil.rank() != 2 || bil.dims[0] != bil.dims[1] || cw.rank() != 2 {
            return Err(Error::Format(format!("checkpoint {} has malformed shapes", path.display())));
        }
        let channels = bil.dims[0] as usize;
        let classes = cw.dims[0] as usize;
        let mut head = Self::zeros(channels, classes);
        let widen = |t: &Tensor, len: usize, name: &str| -> Result<Vec<f64>> {
            if t.data.len() != len {
                return Err(Error::Format(format!(
                    "checkpoint section `{name}` has {} values, expected {len}",
                    t.data.len()
                )));
            }
            Ok(t.data.iter().map(|&v| v as f64).collect())
        };
        head.bilinear = widen(bil, channels * channels, "bilinear")?;
        head.class_weights = widen(cw, classes * channels, "class_weights")?;
        head.class_bias = widen(get("class_bias")?, classes, "class_bias")?;
        let off = widen(get("offsets")?, NUM_CANDIDATES, "offsets")?;
        let iw = widen(get("iou_weights")?, 2 * NUM_CANDIDATES, "iou_weights")?;
        let ib = widen(get("iou_bias")?, NUM_CANDIDATES, "iou_bias")?;
        for k in 0..NUM_CANDIDATES {
            head.offsets[k] = off[k];
            head.iou_weights[k] = [iw[2 * k], iw[2 * k + 1]];
            head.iou_bias[k] = ib[k];
        }
        Ok(head)
    }

    /// Same head with every parameter rounded through f32, as a checkpoint
    /// round trip would leave it.
    pub fn rounded_to_f32(&self) -> Self {
        let mut h = self.clone();
        let p: Vec<f64> = self.params().iter().map(|&v| v as f32 as f64).collect();
        h.set_params(&p);
        h
    }
}

pub(crate) fn pool_over(features: &FeatureMap, cells: &[usize], on: &[bool]) -> Vec<f64> {
    let n = features.cell_count();
    let mut counts = vec![0u32; n];
    let mut total = 0u32;
    for (&c, &m) in cells.iter().zip(on) {
        if m {
            counts[c] += 1;
            total += 1;
        }
    }
    let mut pooled = vec![0.0; features.channels()];
    if total == 0 {
        return pooled;
    }
    for (k, out) in pooled.iter_mut().enumerate() {
        let plane = features.plane(k);
        *out = counts
            .iter()
            .zip(plane)
            .filter(|(&n, _)| n > 0)
            .map(|(&n, &f)| n as f64 * f as f64)
            .sum::<f64>()
            / total as f64;
    }
    pooled
}

/// Index of the candidate with the highest IoU against `gt`; ties go to
/// the lowest index.
pub fn select_best_candidate(candidates: &[MaskCandidate], gt: &InstanceMask) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::arg("no candidates to select from"));
    }
    let ious: Vec<f64> = candidates.iter().map(|c| c.mask.iou(&gt.mask)).collect();
    Ok(argmax(&ious).unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Provenance;

    fn two_by_two() -> FeatureMap {
        FeatureMap::from_cells(
            "t",
            2,
            2,
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 2.0]],
            Provenance::ToyEncoder,
        )
        .unwrap()
    }

    #[test]
    fn always_three_candidates_and_zero_head_is_empty() {
        let f = two_by_two();
        let h = ToyHead::zeros(2, 3);
        let c = h.predict_candidates(&f, 4, 4, (1.0, 1.0)).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|c| c.mask.is_empty() && c.logits.iter().all(|&z| z == 0.0)));
        assert!(h.predict_candidates(&f, 4, 4, (4.0, 1.0)).is_err());
    }

    #[test]
    fn bilinear_logits_by_hand() {
        let f = two_by_two();
        let mut h = ToyHead::zeros(2, 1);
        // W = [[1, 2], [0, -1]]
        h.bilinear = vec![1.0, 2.0, 0.0, -1.0];
        h.offsets = [0.5, 0.0, -0.5];
        // prompt in cell 0: f(p) = (1, 0), W f(p) = (1, 0)
        let a = h.predict_candidates(&f, 2, 2, (0.2, 0.7)).unwrap();
        assert_eq!(a[0].logits, vec![1.5, 0.5, 1.5, -0.5]);
        // prompt in cell 3: f(p) = (-1, 2), W f(p) = (3, -2)
        let b = h.predict_candidates(&f, 2, 2, (1.5, 1.5)).unwrap();
        assert_eq!(b[1].logits, vec![3.0, -2.0, 1.0, -7.0]);
        assert_ne!(a[1].logits, b[1].logits);
        assert_eq!(b[1].mask.as_slice(), &[true, false, true, false]);
    }

    #[test]
    fn selection_follows_pixel_iou() {
        let gt = InstanceMask {
            instance_id: "g".into(),
            label: ClassId(0),
            mask: BinaryMask::from_fn(10, 1, |x, _| x < 10),
        };
        let cand = |n: u32| MaskCandidate {
            mask: BinaryMask::from_fn(10, 1, |x, _| x < n),
            logits: vec![],
            predicted_iou: 0.0,
            prompt_point: (0.0, 0.0),
            candidate_index: 0,
            label_logits: vec![],
        };
        let set = vec![cand(2), cand(7), cand(5)];
        assert_eq!(select_best_candidate(&set, &gt).unwrap(), 1);
        assert_eq!(select_best_candidate(&set[..1], &gt).unwrap(), 0);
        assert_eq!(select_best_candidate(&[cand(0), cand(0)], &gt).unwrap(), 0);
        assert!(select_best_candidate(&[], &gt).is_err());
    }

    #[test]
    fn classify_degenerate_cases() {
        let f = two_by_two();
        let h = ToyHead::random(2, 1, 3);
        assert_eq!(h.classify(&f, &BinaryMask::from_fn(2, 2, |x, _| x == 0)), ClassId(0));
        let mut h = ToyHead::zeros(2, 4);
        h.class_bias = vec![0.0, 1.0, 1.0, 0.5];
        assert_eq!(h.classify(&f, &BinaryMask::new(2, 2)), ClassId(1));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.ckpt");
        let mut h = ToyHead::random(5, 8, 11);
        h.offsets = [0.25, -1.0, 3.5];
        h.iou_weights[2] = [0.1, -0.2];
        h.save(&path).unwrap();
        let back = ToyHead::load(&path).unwrap();
        assert_eq!(back, h.rounded_to_f32());
        assert!(matches!(ToyHead::load(&dir.path().join("nope")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn params_round_trip() {
        let h = ToyHead::random(3, 4, 1);
        let mut g = ToyHead::zeros(3, 4);
        g.set_params(&h.params());
        assert_eq!(g, h);
        assert_eq!(h.params().len(), h.param_count());
    }
}
