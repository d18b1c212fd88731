//! Mask-pooled embeddings, cosine confidence maps and location priors.

use serde::Serialize;

use crate::dataset::{resample_mask_nearest, InstanceMask};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskEmbedding {
    pub vector: Vec<f64>,
    pub source_instance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceMap {
    pub height: usize,
    pub width: usize,
    /// Row-major cosine similarities in [-1, 1].
    pub values: Vec<f64>,
    /// `(row, col)` of the maximum, lowest row-major index on ties.
    pub argmax_cell: (usize, usize),
}

impl ConfidenceMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.at(self.argmax_cell.0, self.argmax_cell.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocationPrior {
    pub pixel: (u32, u32),
    pub confidence: f64,
}

/// Mask at feature resolution, nearest-neighbour by cell centre.
pub fn downsample_mask(mask: &BinaryMask, features: &FeatureMap) -> BinaryMask {
    resample_mask_nearest(mask, features.width() as u32, features.height() as u32)
}

/// Mean feature vector over the cells the mask covers. A mask too small to
/// survive downsampling falls back to the cell under its centroid.
pub fn mask_pooled_embedding(features: &FeatureMap, mask: &InstanceMask) -> MaskEmbedding {
    let small = downsample_mask(&mask.mask, features);
    let c = features.channels();
    let n = features.cell_count();
    let mut vector = vec![0.0f64; c];
    let cells: Vec<usize> = small
        .as_slice()
        .iter()
        .enumerate()
        .filter_map(|(i, &on)| on.then_some(i))
        .collect();
    let cells = if cells.is_empty() {
        match mask.mask.centroid() {
            Some((cx, cy)) => {
                let (w, h) = mask.mask.dims();
                let col = (((cx + 0.5) * features.width() as f64 / w as f64) as usize)
                    .min(features.width() - 1);
                let row = (((cy + 0.5) * features.height() as f64 / h as f64) as usize)
                    .min(features.height() - 1);
                vec![row * features.width() + col]
            }
            None => Vec::new(),
        }
    } else {
        cells
    };
    let values = features.values();
    for &i in &cells {
        for (k, v) in vector.iter_mut().enumerate() {
            *v += values[k * n + i] as f64;
        }
    }
    if !cells.is_empty() {
        let inv = 1.0 / cells.len() as f64;
        vector.iter_mut().for_each(|v| *v *= inv);
    }
    MaskEmbedding {
        vector,
        source_instance: mask.instance_id.clone(),
    }
}

/// Cosine similarity of every feature cell with the embedding.
pub fn confidence_map(features: &FeatureMap, embedding: &MaskEmbedding) -> Result<ConfidenceMap> {
    let c = features.channels();
    if embedding.vector.len() != c {
        return Err(Error::arg(format!(
            "embedding has {} channels, feature map has {c}",
            embedding.vector.len()
        )));
    }
    let n = features.cell_count();
    let e_norm = embedding.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    let raw = features.values();
    let mut values = vec![0.0f64; n];
    let mut best = 0usize;
    for (i, out) in values.iter_mut().enumerate() {
        let (mut dot, mut ff) = (0.0f64, 0.0f64);
        for (k, e) in embedding.vector.iter().enumerate() {
            let f = raw[k * n + i] as f64;
            dot += f * e;
            ff += f * f;
        }
        let denom = ff.sqrt() * e_norm;
        *out = if denom > 0.0 {
            (dot / denom).clamp(-1.0, 1.0)
        } else {
            0.0
        };
    }
    for i in 1..n {
        if values[i] > values[best] {
            best = i;
        }
    }
    Ok(ConfidenceMap {
        height: features.height(),
        width: features.width(),
        values,
        argmax_cell: (best / features.width(), best % features.width()),
    })
}

/// Maps the argmax cell centre to an integer canvas pixel.
pub fn location_prior(map: &ConfidenceMap, canvas_w: u32, canvas_h: u32) -> LocationPrior {
    let (row, col) = map.argmax_cell;
    let to_pixel = |idx: usize, cells: usize, side: u32| -> u32 {
        let v = ((idx as f64 + 0.5) * side as f64 / cells as f64 - 0.5).round();
        v.clamp(0.0, (side - 1) as f64) as u32
    };
    LocationPrior {
        pixel: (to_pixel(col, map.width, canvas_w), to_pixel(row, map.height, canvas_h)),
        confidence: map.max(),
    }
}

/// Embedding, confidence map and prior for one instance on its canvas.
pub fn prior_for_instance(features: &FeatureMap, mask: &InstanceMask) -> Result<LocationPrior> {
    let emb = mask_pooled_embedding(features, mask);
    let map = confidence_map(features, &emb)?;
    let (w, h) = mask.mask.dims();
    Ok(location_prior(&map, w, h))
}
