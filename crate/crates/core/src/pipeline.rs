//! Everything-mode runs: prompt every grid point, filter the candidates,
//! score ground truth from its assigned point, and write the artifacts.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_manifest, resize_manifest, ClassTable, ImageEntry, Manifest};
use crate::error::{Error, Result};
use crate::features::{FeatureDir, FeatureProvider, ToyEncoder};
use crate::fsutil;
use crate::grid::{assign_instance, build_grid};
use crate::head::{pixel_cells, MaskCandidate, ToyHead, TrainConfig};
use crate::mask::BinaryMask;
use crate::metrics::{
    instance_iou_acc, per_class_aggregate, render_report, report_json, AccuracyDef, EvalReport, InstanceEval,
};
use crate::postprocess::{box_nms, count_masks, prefilter, run_pipeline, FilterConfig, MaskCountReport};

/// Where feature maps come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureSource {
    Toy { stride: u32 },
    Dir { path: PathBuf },
}

impl FeatureSource {
    pub fn provider(&self) -> Result<Box<dyn FeatureProvider>> {
        Ok(match self {
            FeatureSource::Toy { stride } => {
                if *stride == 0 {
                    return Err(Error::arg("toy encoder stride must be >= 1"));
                }
                Box::new(ToyEncoder { stride: *stride })
            }
            FeatureSource::Dir { path } => Box::new(FeatureDir::new(path)?),
        })
    }

    /// Fails unless features exist for every image of the manifest.
    pub fn check(&self, manifest: &Manifest) -> Result<()> {
        if let FeatureSource::Dir { path } = self {
            let dir = FeatureDir::new(path)?;
            for img in &manifest.images {
                if !dir.path_for(&img.frame.id).exists() {
                    return Err(Error::MissingFeatures(img.frame.id.clone()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub features: FeatureSource,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub grid_per_side: u32,
    pub filter: FilterConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Square canvas side to upsample to; native resolution when absent.
    pub canvas: Option<u32>,
    pub accuracy: AccuracyDef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub image_id: String,
    pub pre_filter: usize,
    pub survivors: Vec<MaskCandidate>,
    pub evals: Vec<InstanceEval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EverythingOutput {
    pub images: Vec<ImageResult>,
    pub report: EvalReport,
    pub counts: MaskCountReport,
}

impl EverythingOutput {
    pub fn evals(&self) -> impl Iterator<Item = &InstanceEval> {
        self.images.iter().flat_map(|i| i.evals.iter())
    }
}

/// Loads a manifest and optionally upsamples it to a square canvas.
pub fn prepare_manifest(path: &Path, canvas: Option<u32>) -> Result<Manifest> {
    let m = load_manifest(path)?;
    match canvas {
        Some(side) => resize_manifest(&m, side),
        None => Ok(m),
    }
}

fn process_image(
    head: &ToyHead,
    img: &ImageEntry,
    provider: &dyn FeatureProvider,
    per_side: u32,
    filter: &FilterConfig,
    accuracy: AccuracyDef,
) -> Result<ImageResult> {
    let f = provider.features(&img.frame)?;
    let (w, h) = (img.frame.width(), img.frame.height());
    let grid = build_grid(per_side, w, h)?;
    let cells = pixel_cells(&f, w, h);
    let assigned = img
        .instances()
        .map(|m| assign_instance(&f, m, &grid).map(|a| a.grid_index))
        .collect::<Result<HashSet<usize>>>()?;

    let mut at_assigned = Vec::new();
    let mut kept = Vec::new();
    let mut pre_filter = 0;
    for (gi, &point) in grid.points().iter().enumerate() {
        let mut cands = head.predict_with_cells(&f, &cells, w, h, point)?;
        pre_filter += cands.len();
        cands.iter_mut().for_each(MaskCandidate::release_logits);
        if assigned.contains(&gi) {
            at_assigned.extend(cands.iter().cloned());
        }
        kept.extend(prefilter(cands, filter));
    }
    let survivors = box_nms(kept, filter.box_iou_cutoff);
    let evals = img
        .instances()
        .map(|m| instance_iou_acc(m, &at_assigned, &grid, &f, accuracy))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageResult {
        image_id: img.frame.id.clone(),
        pre_filter,
        survivors,
        evals,
    })
}

/// In-memory everything-mode run over a manifest. Images are processed in
/// parallel and merged in manifest order.
///
/// Ground truth is scored on the raw candidates at its assigned grid point,
/// before filtering; the survivors feed the mask counts.
pub fn everything_mode(
    head: &ToyHead,
    manifest: &Manifest,
    provider: &dyn FeatureProvider,
    per_side: u32,
    filter: &FilterConfig,
    accuracy: AccuracyDef,
) -> Result<EverythingOutput> {
    filter.validate()?;
    if head.classes() != manifest.class_table.len() {
        return Err(Error::arg(format!(
            "head has {} classes, class table has {}",
            head.classes(),
            manifest.class_table.len()
        )));
    }
    let images = manifest
        .images
        .par_iter()
        .map(|img| process_image(head, img, provider, per_side, filter, accuracy))
        .collect::<Result<Vec<_>>>()?;
    let evals: Vec<InstanceEval> = images.iter().flat_map(|i| i.evals.iter().cloned()).collect();
    let report = per_class_aggregate(&evals, &manifest.class_table);
    let counts = MaskCountReport::new(vec![
        count_masks("vanilla", images.iter().map(|i| (i.image_id.as_str(), i.pre_filter))),
        count_masks("filtered", images.iter().map(|i| (i.image_id.as_str(), i.survivors.len()))),
    ]);
    Ok(EverythingOutput { images, report, counts })
}

/// Checks inputs, runs [`everything_mode`], and writes survivors, counts
/// and the evaluation report under `config.out_dir`. Nothing is written if
/// the checkpoint or features are missing.
pub fn run_everything_mode(config: &RunConfig) -> Result<EverythingOutput> {
    if !config.checkpoint.exists() {
        return Err(Error::MissingFile(config.checkpoint.clone()));
    }
    let manifest = prepare_manifest(&config.manifest, config.canvas)?;
    config.features.check(&manifest)?;
    let provider = config.features.provider()?;
    let head = ToyHead::load(&config.checkpoint)?;
    let out = everything_mode(
        &head,
        &manifest,
        provider.as_ref(),
        config.grid_per_side,
        &config.filter,
        config.accuracy,
    )?;
    write_everything_outputs(&config.out_dir, &out, &manifest.class_table)?;
    Ok(out)
}

pub fn write_everything_outputs(out_dir: &Path, out: &EverythingOutput, table: &ClassTable) -> Result<()> {
    let survivors: Vec<(String, Vec<MaskCandidate>)> = out
        .images
        .iter()
        .map(|i| (i.image_id.clone(), i.survivors.clone()))
        .collect();
    write_survivors(&out_dir.join("survivors"), &survivors, |_, c| {
        c.predicted_label().map(|id| table.name(id).to_string())
    })?;
    write_counts(out_dir, &out.counts)?;
    write_eval(out_dir, &out.report, None)?;
    let evals: Vec<&InstanceEval> = out.evals().collect();
    fsutil::write_json_atomic(&out_dir.join("instances.json"), &evals)
}

pub fn write_counts(out_dir: &Path, counts: &MaskCountReport) -> Result<()> {
    fsutil::write_json_atomic(&out_dir.join("counts.json"), counts)?;
    fsutil::write_atomic(&out_dir.join("counts.txt"), counts.render_text().as_bytes())
}

pub fn write_eval(out_dir: &Path, report: &EvalReport, baseline: Option<&EvalReport>) -> Result<()> {
    fsutil::write_json_atomic(&out_dir.join("eval.json"), &report_json(report, baseline))?;
    fsutil::write_atomic(&out_dir.join("eval.txt"), render_report(report, baseline).as_bytes())
}

pub fn write_run_manifest<T: Serialize + ?Sized>(out_dir: &Path, resolved: &T) -> Result<()> {
    fsutil::write_json_atomic(&out_dir.join("run_manifest.json"), resolved)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivorEntry {
    pub file: String,
    pub predicted_iou: f64,
    pub prompt_point: [f64; 2],
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivorIndex {
    pub image_id: String,
    pub masks: Vec<SurvivorEntry>,
}

/// Writes `<dir>/<image_id>/mask_###.png` and `<dir>/<image_id>/index.json`
/// for each image, replacing any previous contents of `dir`.
pub fn write_survivors(
    dir: &Path,
    images: &[(String, Vec<MaskCandidate>)],
    label_of: impl Fn(&str, &MaskCandidate) -> Option<String> + Sync,
) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    images.par_iter().try_for_each(|(id, cands)| {
        let sub = dir.join(id);
        let mut masks = Vec::with_capacity(cands.len());
        for (k, c) in cands.iter().enumerate() {
            let file = format!("mask_{k:03}.png");
            let path = sub.join(&file);
            fsutil::write_atomic(&path, &fsutil::encode_gray_png(&c.mask.to_gray(), &path)?)?;
            masks.push(SurvivorEntry {
                file,
                predicted_iou: c.predicted_iou,
                prompt_point: [c.prompt_point.0, c.prompt_point.1],
                label: label_of(id, c),
            });
        }
        let index = SurvivorIndex {
            image_id: id.clone(),
            masks,
        };
        fsutil::write_json_atomic(&sub.join("index.json"), &index)
    })
}

/// Image id, its candidates, and its label vocabulary.
pub type SavedImage = (String, Vec<MaskCandidate>, Vec<String>);

/// Reads a survivors directory back. Each candidate carries one-hot label
/// logits over the labels recorded in its own image's index, returned
/// alongside as that image's label vocabulary.
pub fn read_survivors(dir: &Path) -> Result<Vec<SavedImage>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("index.json").is_file())
        .collect();
    subdirs.sort();
    subdirs
        .iter()
        .map(|sub| {
            let index: SurvivorIndex = fsutil::read_json(&sub.join("index.json"))?;
            let mut vocab: Vec<String> = index.masks.iter().filter_map(|m| m.label.clone()).collect();
            vocab.sort();
            vocab.dedup();
            let cands = index
                .masks
                .iter()
                .map(|m| {
                    let path = sub.join(&m.file);
                    let mask = BinaryMask::from_gray(&fsutil::decode_image(&path)?.to_luma8());
                    let label_logits = match &m.label {
                        Some(l) => vocab.iter().map(|v| if v == l { 1.0 } else { 0.0 }).collect(),
                        None => Vec::new(),
                    };
                    Ok(MaskCandidate {
                        mask,
                        logits: Vec::new(),
                        predicted_iou: m.predicted_iou,
                        prompt_point: (m.prompt_point[0], m.prompt_point[1]),
                        candidate_index: 0,
                        label_logits,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((index.image_id, cands, vocab))
        })
        .collect()
}

/// Re-applies the filtering pipeline to saved survivors and writes the
/// result to `out_dir/survivors` with new counts.
pub fn refilter(in_dir: &Path, out_dir: &Path, filter: &FilterConfig) -> Result<MaskCountReport> {
    filter.validate()?;
    let loaded = read_survivors(in_dir)?;
    let before = count_masks("input", loaded.iter().map(|(id, c, _)| (id.as_str(), c.len())));
    let filtered: Vec<SavedImage> = loaded
        .into_par_iter()
        .map(|(id, c, vocab)| (id, run_pipeline(c, filter), vocab))
        .collect();
    let after = count_masks("filtered", filtered.iter().map(|(id, c, _)| (id.as_str(), c.len())));
    let vocabs: HashMap<&str, &[String]> = filtered
        .iter()
        .map(|(id, _, v)| (id.as_str(), v.as_slice()))
        .collect();
    let images: Vec<(String, Vec<MaskCandidate>)> = filtered
        .iter()
        .map(|(id, c, _)| (id.clone(), c.clone()))
        .collect();
    write_survivors(&out_dir.join("survivors"), &images, |id, c| {
        c.predicted_label().map(|k| vocabs[id][k.0].clone())
    })?;
    let counts = MaskCountReport::new(vec![before, after]);
    write_counts(out_dir, &counts)?;
    Ok(counts)
}
