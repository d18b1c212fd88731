//! Everything-mode prompt grid and nearest-point assignment.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::prior_for_instance;
use crate::dataset::{InstanceMask, Manifest};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureProvider};
use crate::fsutil;

/// `per_side`² prompt points at cell centres, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGrid {
    per_side: u32,
    width: u32,
    height: u32,
    points: Vec<(f64, f64)>,
}

pub fn build_grid(per_side: u32, width: u32, height: u32) -> Result<PointGrid> {
    if per_side == 0 {
        return Err(Error::arg("grid per_side must be >= 1"));
    }
    if width < per_side || height < per_side {
        return Err(Error::arg(format!(
            "a {per_side}x{per_side} grid does not fit a {width}x{height} canvas"
        )));
    }
    let k = per_side as f64;
    let mut points = Vec::with_capacity((per_side * per_side) as usize);
    for i in 0..per_side {
        for j in 0..per_side {
            points.push((
                (j as f64 + 0.5) * width as f64 / k,
                (i as f64 + 0.5) * height as f64 / k,
            ));
        }
    }
    Ok(PointGrid {
        per_side,
        width,
        height,
        points,
    })
}

impl PointGrid {
    pub fn per_side(&self) -> u32 {
        self.per_side
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Integer pixel under a grid point, used when a prompt needs a pixel.
    pub fn pixel(&self, index: usize) -> (u32, u32) {
        let (x, y) = self.points[index];
        (x.floor() as u32, y.floor() as u32)
    }

    pub fn half_cell_diagonal(&self) -> f64 {
        let k = self.per_side as f64;
        ((self.width as f64 / k).powi(2) + (self.height as f64 / k).powi(2)).sqrt() / 2.0
    }
}

fn sq_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    dx * dx + dy * dy
}

/// Flat index of the grid point closest to `prior`; lowest index on ties.
///
/// Only the 3×3 block around the containing cell can hold the minimum, so
/// that block is scanned in row-major order.
pub fn nearest_neighbour_assign(prior: (f64, f64), grid: &PointGrid) -> Result<usize> {
    let (x, y) = prior;
    if !(x >= 0.0 && x < grid.width as f64 && y >= 0.0 && y < grid.height as f64) {
        return Err(Error::arg(format!(
            "prior ({x}, {y}) lies outside the {}x{} canvas",
            grid.width, grid.height
        )));
    }
    let k = grid.per_side as i64;
    let cj = ((x * k as f64 / grid.width as f64) as i64).min(k - 1);
    let ci = ((y * k as f64 / grid.height as f64) as i64).min(k - 1);
    let mut best = usize::MAX;
    let mut best_d = f64::INFINITY;
    for i in (ci - 1).max(0)..=(ci + 1).min(k - 1) {
        for j in (cj - 1).max(0)..=(cj + 1).min(k - 1) {
            let idx = (i * k + j) as usize;
            let d = sq_dist(prior, grid.points[idx]);
            if d < best_d {
                best_d = d;
                best = idx;
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub instance_id: String,
    pub prior: [f64; 2],
    pub grid_index: usize,
    pub grid_point: [f64; 2],
}

/// Confidence-map prior for one instance, snapped to the grid.
pub fn assign_instance(features: &FeatureMap, mask: &InstanceMask, grid: &PointGrid) -> Result<Assignment> {
    if mask.mask.dims() != (grid.width, grid.height) {
        return Err(Error::arg(format!(
            "mask `{}` is {:?}, grid canvas is {}x{}",
            mask.instance_id,
            mask.mask.dims(),
            grid.width,
            grid.height
        )));
    }
    let prior = prior_for_instance(features, mask)?;
    let p = (prior.pixel.0 as f64, prior.pixel.1 as f64);
    let idx = nearest_neighbour_assign(p, grid)?;
    let g = grid.points[idx];
    Ok(Assignment {
        instance_id: mask.instance_id.clone(),
        prior: [p.0, p.1],
        grid_index: idx,
        grid_point: [g.0, g.1],
    })
}

/// One assignment per instance, in manifest order. Each image gets a
/// `per_side` grid over its own canvas.
pub fn assign_dataset(
    manifest: &Manifest,
    features: &dyn FeatureProvider,
    per_side: u32,
) -> Result<Vec<Assignment>> {
    let per_image = manifest
        .images
        .par_iter()
        .map(|img| {
            let f = features.features(&img.frame)?;
            let grid = build_grid(per_side, img.frame.width(), img.frame.height())?;
            img.instances()
                .map(|m| assign_instance(&f, m, &grid))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn save_assignments(assignments: &[Assignment], path: &Path) -> Result<()> {
    fsutil::write_json_atomic(path, assignments)
}

pub fn load_assignments(path: &Path) -> Result<Vec<Assignment>> {
    fsutil::read_json(path)
}

/// Lookup by instance id.
pub fn index_assignments(assignments: &[Assignment]) -> HashMap<&str, &Assignment> {
    assignments
        .iter()
        .map(|a| (a.instance_id.as_str(), a))
        .collect()
}
