use crate::mask::BinaryMask;

const NEIGHBOURS: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// 8-connected components of the pixels equal to `value`. Returns a label
/// per pixel (`u32::MAX` for other pixels) and the size of each component.
pub fn components(data: &[bool], width: u32, height: u32, value: bool) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (width as i64, height as i64);
    let mut labels = vec![u32::MAX; data.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..data.len() {
        if data[start] != value || labels[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        labels[start] = id;
        stack.push(start);
        let mut size = 0usize;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = ((i as i64) % w, (i as i64) / w);
            for (dx, dy) in NEIGHBOURS {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let j = (ny * w + nx) as usize;
                if data[j] == value && labels[j] == u32::MAX {
                    labels[j] = id;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

fn flip_small(data: &mut [bool], width: u32, height: u32, value: bool, min_area: usize) {
    let (labels, sizes) = components(data, width, height, value);
    for (d, &l) in data.iter_mut().zip(&labels) {
        if l != u32::MAX && sizes[l as usize] < min_area {
            *d = !value;
        }
    }
}

/// Removes foreground islands smaller than `min_area`, then fills
/// background holes smaller than `min_area`. Both use 8-connectivity.
/// A mask left empty by island removal is returned empty.
pub fn clean_regions(mask: &BinaryMask, min_area: usize) -> BinaryMask {
    let mut out = mask.clone();
    if min_area == 0 {
        return out;
    }
    let (w, h) = out.dims();
    flip_small(out.as_mut_slice(), w, h, true, min_area);
    if out.is_empty() {
        return out;
    }
    flip_small(out.as_mut_slice(), w, h, false, min_area);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_pixels_connect() {
        let m = BinaryMask::from_fn(3, 3, |x, y| x == y);
        let (_, sizes) = components(m.as_slice(), 3, 3, true);
        assert_eq!(sizes, vec![3]);
        let (_, bg) = components(m.as_slice(), 3, 3, false);
        // the two background triangles touch diagonally too
        assert_eq!(bg, vec![6]);
    }

    #[test]
    fn island_removed_blob_kept() {
        // 20x10 blob (200 px) and a 10x10 island (100 px)
        let m = BinaryMask::from_fn(40, 40, |x, y| (x < 20 && y < 10) || (x >= 30 && y >= 30));
        let out = clean_regions(&m, 150);
        assert_eq!(out, BinaryMask::from_fn(40, 40, |x, y| x < 20 && y < 10));
    }

    #[test]
    fn small_hole_filled() {
        let m = BinaryMask::from_fn(30, 30, |x, y| !((10..20).contains(&x) && (10..20).contains(&y)));
        let out = clean_regions(&m, 150);
        assert_eq!(out.area(), 900);
    }

    #[test]
    fn exact_min_area_component_kept() {
        let m = BinaryMask::from_fn(40, 40, |x, y| x < 15 && y < 10);
        assert_eq!(m.area(), 150);
        assert_eq!(clean_regions(&m, 150), m);
    }

    #[test]
    fn all_small_gives_empty() {
        let m = BinaryMask::from_fn(10, 10, |x, y| x < 3 && y < 3);
        assert!(clean_regions(&m, 150).is_empty());
    }
}
