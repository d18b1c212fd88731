//! Dense image feature maps and where they come from.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{ImageFrame, Manifest};
use crate::error::{Error, Result};
use crate::featfile::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ToyEncoder,
    BridgeExport,
}

/// A `channels × height × width` feature tensor for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub image_id: String,
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
    pub provenance: Provenance,
}

impl FeatureMap {
    pub fn new(
        image_id: impl Into<String>,
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
        provenance: Provenance,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "feature map for `{image_id}` has a zero dimension ({channels}x{height}x{width})"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "feature map for `{image_id}` has {} values, expected {}",
                values.len(),
                channels * height * width
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "feature map for `{image_id}` has a non-finite value at flat index {i}"
            )));
        }
        Ok(Self {
            image_id,
            channels,
            height,
            width,
            values,
            provenance,
        })
    }

    /// Builds a map from per-cell vectors given in row-major cell order.
    pub fn from_cells(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        cells: &[Vec<f32>],
        provenance: Provenance,
    ) -> Result<Self> {
        let channels = cells.first().map_or(0, Vec::len);
        let mut values = vec![0.0f32; channels * height * width];
        for (i, cell) in cells.iter().enumerate() {
            if cell.len() != channels {
                return Err(Error::arg("cells have differing channel counts"));
            }
            for (c, &v) in cell.iter().enumerate() {
                values[c * height * width + i] = v;
            }
        }
        Self::new(image_id, channels, height, width, values, provenance)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cell_count(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Channel plane `c` in row-major cell order.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.cell_count();
        &self.values[c * n..(c + 1) * n]
    }

    /// Feature vector at flat cell index, widened to f64.
    pub fn cell(&self, idx: usize) -> Vec<f64> {
        let n = self.cell_count();
        (0..self.channels)
            .map(|c| self.values[c * n + idx] as f64)
            .collect()
    }

    /// Cell containing canvas pixel `(x, y)` on a `canvas_w`×`canvas_h` canvas.
    pub fn cell_of_pixel(&self, x: u32, y: u32, canvas_w: u32, canvas_h: u32) -> usize {
        let r = (y as usize * self.height / canvas_h as usize).min(self.height - 1);
        let c = (x as usize * self.width / canvas_w as usize).min(self.width - 1);
        r * self.width + c
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self {
            values: self.values.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.channels as u32, self.height as u32, self.width as u32],
            data: self.values.clone(),
        }
    }

    pub fn from_tensor(image_id: impl Into<String>, t: Tensor, provenance: Provenance) -> Result<Self> {
        let image_id = image_id.into();
        if t.rank() != 3 {
            return Err(Error::Format(format!(
                "feature tensor for `{image_id}` has rank {}, expected 3 (C, fh, fw)",
                t.rank()
            )));
        }
        let (c, h, w) = (t.dims[0] as usize, t.dims[1] as usize, t.dims[2] as usize);
        Self::new(image_id, c, h, w, t.data, provenance)
    }
}

/// Source of per-image feature maps.
pub trait FeatureProvider: Sync {
    fn features(&self, frame: &ImageFrame) -> Result<Arc<FeatureMap>>;
}

/// Hand-built encoder for synthetic data: box-downsampled RGB scaled to
/// [-1, 1] plus two normalized coordinate channels (C = 5).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyEncoder {
    pub stride: u32,
}

impl Default for ToyEncoder {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

impl ToyEncoder {
    pub const CHANNELS: usize = 5;

    pub fn encode(&self, frame: &ImageFrame) -> Result<FeatureMap> {
        if self.stride == 0 {
            return Err(Error::arg("toy encoder stride must be >= 1"));
        }
        let (w, h) = (frame.width() as usize, frame.height() as usize);
        let s = self.stride as usize;
        let (fw, fh) = (w.div_ceil(s), h.div_ceil(s));
        let n = fw * fh;
        let mut values = vec![0.0f32; Self::CHANNELS * n];
        for r in 0..fh {
            for c in 0..fw {
                let mut sum = [0.0f64; 3];
                let mut count = 0.0;
                for y in r * s..((r + 1) * s).min(h) {
                    for x in c * s..((c + 1) * s).min(w) {
                        let p = frame.image.get_pixel(x as u32, y as u32).0;
                        for k in 0..3 {
                            sum[k] += p[k] as f64;
                        }
                        count += 1.0;
                    }
                }
                let idx = r * fw + c;
                for k in 0..3 {
                    values[k * n + idx] = (2.0 * sum[k] / count / 255.0 - 1.0) as f32;
                }
                values[3 * n + idx] = (2.0 * (c as f64 + 0.5) / fw as f64 - 1.0) as f32;
                values[4 * n + idx] = (2.0 * (r as f64 + 0.5) / fh as f64 - 1.0) as f32;
            }
        }
        FeatureMap::new(frame.id.clone(), Self::CHANNELS, fh, fw, values, Provenance::ToyEncoder)
    }
}

impl FeatureProvider for ToyEncoder {
    fn features(&self, frame: &ImageFrame) -> Result<Arc<FeatureMap>> {
        self.encode(frame).map(Arc::new)
    }
}

/// Reads `<dir>/<image_id>.feat` files written by an external exporter.
#[derive(Debug, Clone)]
pub struct FeatureDir {
    dir: PathBuf,
}

impl FeatureDir {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(Error::MissingFile(dir));
        }
        Ok(Self { dir })
    }

    pub fn path_for(&self, image_id: &str) -> PathBuf {
        self.dir.join(format!("{image_id}.feat"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl FeatureProvider for FeatureDir {
    fn features(&self, frame: &ImageFrame) -> Result<Arc<FeatureMap>> {
        let path = self.path_for(&frame.id);
        if !path.exists() {
            return Err(Error::MissingFeatures(frame.id.clone()));
        }
        let t = featfile::read_tensor_file(&path)?;
        FeatureMap::from_tensor(frame.id.clone(), t, Provenance::BridgeExport).map(Arc::new)
    }
}

/// Precomputed features keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    maps: HashMap<String, Arc<FeatureMap>>,
}

impl FeatureStore {
    pub fn precompute(manifest: &Manifest, provider: &dyn FeatureProvider) -> Result<Self> {
        let maps = manifest
            .images
            .par_iter()
            .map(|img| Ok((img.frame.id.clone(), provider.features(&img.frame)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { maps })
    }

    pub fn insert(&mut self, map: FeatureMap) {
        self.maps.insert(map.image_id.clone(), Arc::new(map));
    }

    pub fn get(&self, image_id: &str) -> Result<&Arc<FeatureMap>> {
        self.maps
            .get(image_id)
            .ok_or_else(|| Error::MissingFeatures(image_id.to_string()))
    }
}

impl FeatureProvider for FeatureStore {
    fn features(&self, frame: &ImageFrame) -> Result<Arc<FeatureMap>> {
        self.get(&frame.id).cloned()
    }
}
