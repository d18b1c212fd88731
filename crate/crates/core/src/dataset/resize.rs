use image::imageops::{self, FilterType};
use rayon::prelude::*;

use super::{ImageEntry, ImageFrame, InstanceMask, Manifest, MaskEntry};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Nearest-neighbour resampling by destination pixel centre.
pub fn resample_mask_nearest(mask: &BinaryMask, width: u32, height: u32) -> BinaryMask {
    let (sw, sh) = mask.dims();
    let src_x: Vec<u32> = (0..width)
        .map(|x| (((x as f64 + 0.5) * sw as f64 / width as f64) as u32).min(sw - 1))
        .collect();
    let src_y: Vec<u32> = (0..height)
        .map(|y| (((y as f64 + 0.5) * sh as f64 / height as f64) as u32).min(sh - 1))
        .collect();
    BinaryMask::from_fn(width, height, |x, y| {
        mask.get(src_x[x as usize], src_y[y as usize])
    })
}

/// Upsamples a frame (bilinear) and its masks (nearest) to a `side`×`side`
/// canvas. Masks stay strictly binary; one that comes out empty is an error.
pub fn resize_to_canvas(
    frame: &ImageFrame,
    masks: &[InstanceMask],
    side: u32,
) -> Result<(ImageFrame, Vec<InstanceMask>)> {
    let (w, h) = (frame.width(), frame.height());
    if side < w.max(h) {
        return Err(Error::arg(format!(
            "canvas side {side} is smaller than image `{}` ({w}x{h})",
            frame.id
        )));
    }
    if side == w && side == h {
        return Ok((frame.clone(), masks.to_vec()));
    }

    let image = imageops::resize(&frame.image, side, side, FilterType::Triangle);
    let frame = ImageFrame::new(frame.id.clone(), image)?;
    let masks = masks
        .iter()
        .map(|m| {
            let mask = resample_mask_nearest(&m.mask, side, side);
            if mask.is_empty() {
                return Err(Error::invalid(format!(
                    "mask `{}` became empty after resizing to {side}",
                    m.instance_id
                )));
            }
            Ok(InstanceMask {
                instance_id: m.instance_id.clone(),
                label: m.label,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((frame, masks))
}

/// Applies [`resize_to_canvas`] to every image of a manifest.
pub fn resize_manifest(manifest: &Manifest, side: u32) -> Result<Manifest> {
    let images = manifest
        .images
        .par_iter()
        .map(|img| {
            let instances: Vec<InstanceMask> = img.instances().cloned().collect();
            let (frame, resized) = resize_to_canvas(&img.frame, &instances, side)?;
            Ok(ImageEntry {
                file: img.file.clone(),
                frame,
                masks: img
                    .masks
                    .iter()
                    .zip(resized)
                    .map(|(m, instance)| MaskEntry {
                        file: m.file.clone(),
                        instance,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Manifest {
        class_table: manifest.class_table.clone(),
        images,
    })
}
