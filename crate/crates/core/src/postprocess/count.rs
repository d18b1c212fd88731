use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// Output mask counts for one named pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineCount {
    pub name: String,
    pub per_image: IndexMap<String, usize>,
    pub total: usize,
    /// Mean masks per image; absent when per-image counts are unknown.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskCountReport {
    pub pipelines: Vec<PipelineCount>,
}

/// Totals and per-image mean over `(image_id, survivor count)` pairs.
pub fn count_masks<'a>(name: &str, results: impl IntoIterator<Item = (&'a str, usize)>) -> PipelineCount {
    let per_image: IndexMap<String, usize> = results
        .into_iter()
        .map(|(id, n)| (id.to_string(), n))
        .collect();
    let total = per_image.values().sum();
    let mean = (!per_image.is_empty()).then(|| total as f64 / per_image.len() as f64);
    PipelineCount {
        name: name.to_string(),
        per_image,
        total,
        mean,
    }
}

impl PipelineCount {
    /// A pipeline known only by its total, such as a published figure.
    pub fn from_total(name: &str, total: usize) -> Self {
        Self {
            name: name.to_string(),
            per_image: IndexMap::new(),
            total,
            mean: None,
        }
    }
}

impl MaskCountReport {
    pub fn new(pipelines: Vec<PipelineCount>) -> Self {
        Self { pipelines }
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>8} {:>12} {:>12}", "Pipeline", "Images", "Masks", "Per image");
        let _ = writeln!(out, "{}", "-".repeat(51));
        for p in &self.pipelines {
            let images = if p.per_image.is_empty() {
                "-".to_string()
            } else {
                p.per_image.len().to_string()
            };
            let mean = p.mean.map_or("-".to_string(), |m| format!("{m:.2}"));
            let _ = writeln!(out, "{:<16} {:>8} {:>12} {:>12}", p.name, images, p.total, mean);
        }
        out
    }
}
