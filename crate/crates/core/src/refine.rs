//! Boundary-guided refinement of segmentation maps, and a Sobel baseline.

use std::collections::VecDeque;

use crate::error::{contract, Error, Result};
use crate::maps::{BoundaryMap, LabelMap};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_MAX_AREA_FRACTION: f64 = 1.0 / 3.0;

/// Connected components of non-boundary pixels; id 0 marks boundary pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
    pub count: u32,
}

impl RegionMap {
    /// Pixel count per id, index 0 being the boundary.
    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.count as usize + 1];
        for &id in &self.ids {
            a[id as usize] += 1;
        }
        a
    }
}

pub fn threshold_boundary(bmap: &BoundaryMap, t: f32) -> Result<Vec<bool>> {
    contract!(t > 0.0 && t <= 1.0, "threshold {} outside (0, 1]", t);
    Ok(bmap.values.iter().map(|&v| v >= t).collect())
}

/// Labels 4-connected components of `!mask` in raster order of first touch.
pub fn label_regions(mask: &[bool], height: usize, width: usize) -> RegionMap {
    assert_eq!(mask.len(), height * width);
    let mut ids = vec![0u32; mask.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask[start] || ids[start] != 0 {
            continue;
        }
        count += 1;
        ids[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / width, i % width);
            let nbrs = [
                (r > 0).then(|| i - width),
                (r + 1 < height).then(|| i + width),
                (c > 0).then(|| i - 1),
                (c + 1 < width).then(|| i + 1),
            ];
            for j in nbrs.into_iter().flatten() {
                if !mask[j] && ids[j] == 0 {
                    ids[j] = count;
                    queue.push_back(j);
                }
            }
        }
    }
    RegionMap {
        height,
        width,
        ids,
        count,
    }
}

/// Replaces the labels of every region no larger than `max_area_fraction` of
/// the image by the region's most frequent label (ties go to the smaller id).
pub fn refine_segmentation(
    seg: &LabelMap,
    regions: &RegionMap,
    max_area_fraction: f64,
) -> Result<LabelMap> {
    contract!(
        (seg.height, seg.width) == (regions.height, regions.width),
        "segmentation {}x{} and regions {}x{} differ in size",
        seg.height,
        seg.width,
        regions.height,
        regions.width
    );
    let n = regions.count as usize + 1;
    let mut votes = vec![[0u32; 256]; n];
    for (&id, &label) in regions.ids.iter().zip(&seg.values) {
        votes[id as usize][label as usize] += 1;
    }
    let limit = max_area_fraction * seg.len() as f64;
    let winners: Vec<Option<u8>> = votes
        .iter()
        .enumerate()
        .map(|(id, v)| {
            let area: u32 = v.iter().sum();
            if id == 0 || area as f64 > limit {
                return None;
            }
            // max_by_key keeps the last maximum; iterate in reverse so the
            // smallest label wins ties.
            (0..256usize)
                .rev()
                .max_by_key(|&k| v[k])
                .map(|k| k as u8)
        })
        .collect();
    let values = seg
        .values
        .iter()
        .zip(&regions.ids)
        .map(|(&l, &id)| winners[id as usize].unwrap_or(l))
        .collect();
    LabelMap::new(seg.height, seg.width, values)
}

/// Threshold, label and vote in one call.
pub fn refine_with_boundaries(
    seg: &LabelMap,
    boundary: &BoundaryMap,
    threshold: f32,
    max_area_fraction: f64,
) -> Result<LabelMap> {
    let mask = threshold_boundary(boundary, threshold)?;
    let regions = label_regions(&mask, boundary.height, boundary.width);
    refine_segmentation(seg, &regions, max_area_fraction)
}

/// Sobel gradient magnitude of the channel-mean image, scaled by its maximum.
pub fn sobel_edges(rgb: &Tensor) -> Result<BoundaryMap> {
    let (c, h, w) = match rgb.shape() {
        &[c, h, w] => (c, h, w),
        &[1, c, h, w] => (c, h, w),
        s => {
            return Err(Error::Contract(format!(
                "sobel_edges expects C×H×W, got {s:?}"
            )))
        }
    };
    let plane = h * w;
    let d = rgb.data();
    let gray: Vec<f64> = (0..plane)
        .map(|i| (0..c).map(|k| d[k * plane + i] as f64).sum::<f64>() / c.max(1) as f64)
        .collect();
    let at = |r: isize, q: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let q = q.clamp(0, w as isize - 1) as usize;
        gray[r * w + q]
    };
    let mut mag = vec![0.0f64; plane];
    for r in 0..h as isize {
        for q in 0..w as isize {
            let gx = (at(r - 1, q + 1) + 2.0 * at(r, q + 1) + at(r + 1, q + 1))
                - (at(r - 1, q - 1) + 2.0 * at(r, q - 1) + at(r + 1, q - 1));
            let gy = (at(r + 1, q - 1) + 2.0 * at(r + 1, q) + at(r + 1, q + 1))
                - (at(r - 1, q - 1) + 2.0 * at(r - 1, q) + at(r - 1, q + 1));
            mag[r as usize * w + q as usize] = gx.hypot(gy);
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    let values = mag
        .iter()
        .map(|&m| if max > 0.0 { (m / max) as f32 } else { 0.0 })
        .collect();
    BoundaryMap::new(h, w, values)
}
