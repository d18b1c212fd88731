//! Image/mask/label datasets: the JSON manifest format, canvas resizing,
//! statistics and a synthetic shape generator.

mod classes;
mod resize;
mod stats;
mod synth;

use std::collections::HashSet;
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use classes::{Category, ClassEntry, ClassId, ClassTable, SizeClass};
pub use resize::{resize_manifest, resize_to_canvas, resample_mask_nearest};
pub use stats::{dataset_stats, StatsReport};
pub use synth::{render_scene, synth_generate, PlacedShape, ShapeKind, SynthConfig};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::mask::BinaryMask;

/// An RGB image with its dataset id.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub id: String,
    pub image: RgbImage,
}

impl ImageFrame {
    pub fn new(id: impl Into<String>, image: RgbImage) -> Result<Self> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::invalid("image frame must have non-zero dimensions"));
        }
        Ok(Self {
            id: id.into(),
            image,
        })
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn channels(&self) -> u32 {
        3
    }
}

/// One ground-truth object: a binary mask and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub instance_id: String,
    pub label: ClassId,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskEntry {
    /// Path of the mask PNG relative to the manifest.
    pub file: String,
    pub instance: InstanceMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    /// Path of the image PNG relative to the manifest.
    pub file: String,
    pub frame: ImageFrame,
    pub masks: Vec<MaskEntry>,
}

impl ImageEntry {
    pub fn instances(&self) -> impl Iterator<Item = &InstanceMask> {
        self.masks.iter().map(|m| &m.instance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub class_table: ClassTable,
    pub images: Vec<ImageEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestDoc {
    class_table: ClassTable,
    images: Vec<ImageDoc>,
}

#[derive(Serialize, Deserialize)]
struct ImageDoc {
    id: String,
    file: String,
    width: u32,
    height: u32,
    masks: Vec<MaskDoc>,
}

#[derive(Serialize, Deserialize)]
struct MaskDoc {
    file: String,
    label: String,
    instance_id: String,
}

impl Manifest {
    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn mask_count(&self) -> usize {
        self.images.iter().map(|i| i.masks.len()).sum()
    }

    /// Checks the per-mask invariants: matching dimensions, non-empty
    /// masks, known labels and manifest-wide unique instance ids.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for img in &self.images {
            let dims = (img.frame.width(), img.frame.height());
            for m in &img.masks {
                let inst = &m.instance;
                if inst.mask.dims() != dims {
                    return Err(Error::invalid(format!(
                        "mask `{}` is {}x{} but image `{}` is {}x{}",
                        inst.instance_id,
                        inst.mask.width(),
                        inst.mask.height(),
                        img.frame.id,
                        dims.0,
                        dims.1
                    )));
                }
                if inst.mask.is_empty() {
                    return Err(Error::invalid(format!(
                        "mask `{}` has no foreground pixels",
                        inst.instance_id
                    )));
                }
                if self.class_table.get(inst.label).is_none() {
                    return Err(Error::invalid(format!(
                        "mask `{}` has label {} outside the class table",
                        inst.instance_id, inst.label
                    )));
                }
                if !seen.insert(inst.instance_id.as_str()) {
                    return Err(Error::invalid(format!(
                        "duplicate instance id `{}`",
                        inst.instance_id
                    )));
                }
            }
        }
        Ok(())
    }

    fn to_doc(&self) -> ManifestDoc {
        ManifestDoc {
            class_table: self.class_table.clone(),
            images: self
                .images
                .iter()
                .map(|img| ImageDoc {
                    id: img.frame.id.clone(),
                    file: img.file.clone(),
                    width: img.frame.width(),
                    height: img.frame.height(),
                    masks: img
                        .masks
                        .iter()
                        .map(|m| MaskDoc {
                            file: m.file.clone(),
                            label: self.class_table.name(m.instance.label).to_string(),
                            instance_id: m.instance.instance_id.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Reads a manifest and decodes every image and mask it references.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let doc: ManifestDoc = fsutil::read_json(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let table = &doc.class_table;

    let images = doc
        .images
        .par_iter()
        .map(|img| load_image_entry(base, table, img))
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        class_table: doc.class_table,
        images,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn load_image_entry(base: &Path, table: &ClassTable, doc: &ImageDoc) -> Result<ImageEntry> {
    let image_path = base.join(&doc.file);
    let image = fsutil::decode_image(&image_path)?.to_rgb8();
    if image.dimensions() != (doc.width, doc.height) {
        return Err(Error::invalid(format!(
            "image `{}` declared {}x{} but {} decodes to {}x{}",
            doc.id,
            doc.width,
            doc.height,
            image_path.display(),
            image.width(),
            image.height()
        )));
    }
    let frame = ImageFrame::new(doc.id.clone(), image)?;

    let mut masks = Vec::with_capacity(doc.masks.len());
    for m in &doc.masks {
        let mask_path = base.join(&m.file);
        let gray = fsutil::decode_image(&mask_path)?.to_luma8();
        let label = table.lookup(&m.label).ok_or_else(|| {
            Error::invalid(format!(
                "mask `{}` has unknown label `{}`",
                m.instance_id, m.label
            ))
        })?;
        masks.push(MaskEntry {
            file: m.file.clone(),
            instance: InstanceMask {
                instance_id: m.instance_id.clone(),
                label,
                mask: BinaryMask::from_gray(&gray),
            },
        });
    }
    Ok(ImageEntry {
        file: doc.file.clone(),
        frame,
        masks,
    })
}

/// Writes the manifest JSON at `path` and every image/mask PNG at its
/// recorded relative location.
pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let base = path.parent().unwrap_or(Path::new(""));
    manifest.images.par_iter().try_for_each(|img| {
        let p = base.join(&img.file);
        fsutil::write_atomic(&p, &fsutil::encode_rgb_png(&img.frame.image, &p)?)?;
        for m in &img.masks {
            let p = base.join(&m.file);
            fsutil::write_atomic(&p, &fsutil::encode_gray_png(&m.instance.mask.to_gray(), &p)?)?;
        }
        Ok::<_, Error>(())
    })?;
    fsutil::write_json_atomic(path, &manifest.to_doc())
}
