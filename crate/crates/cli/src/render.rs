//! Qualitative output images.

use mcseg_core::autodiff::IGNORE_LABEL;
use mcseg_core::{BoundaryMap, Error, LabelMap, Result, Tensor};

/// Class `k` is drawn as `PALETTE[k % 16]`; ignored pixels are black.
pub const PALETTE: [[u8; 3]; 16] = [
    [128, 64, 128],
    [70, 70, 70],
    [220, 220, 0],
    [220, 20, 60],
    [0, 0, 142],
    [250, 170, 30],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [255, 0, 0],
    [0, 60, 100],
    [119, 11, 32],
    [0, 80, 100],
    [190, 153, 153],
    [102, 102, 156],
    [244, 35, 232],
];

pub const IGNORE_COLOR: [u8; 3] = [0, 0, 0];

pub fn class_color(class: u8) -> [u8; 3] {
    if class == IGNORE_LABEL {
        IGNORE_COLOR
    } else {
        PALETTE[class as usize % PALETTE.len()]
    }
}

/// Interleaved RGB bytes for a label map.
pub fn colorize(labels: &LabelMap) -> Vec<u8> {
    labels.values.iter().flat_map(|&c| class_color(c)).collect()
}

/// Interleaved RGB bytes for a `3×H×W` or `1×3×H×W` image in `[0, 1]`.
pub fn image_bytes(rgb: &Tensor) -> Result<Vec<u8>> {
    let plane = match rgb.shape() {
        &[3, h, w] | &[1, 3, h, w] => h * w,
        s => return Err(Error::Contract(format!("expected a 3-channel image, got {s:?}"))),
    };
    let d = rgb.data();
    Ok((0..plane)
        .flat_map(|i| (0..3).map(move |c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect())
}

/// Places equally sized RGB panels side by side. Returns the new width.
pub fn side_by_side(height: usize, width: usize, panels: &[&[u8]]) -> Result<(usize, Vec<u8>)> {
    for p in panels {
        if p.len() != height * width * 3 {
            return Err(Error::Contract(format!(
                "panel has {} bytes, expected {}",
                p.len(),
                height * width * 3
            )));
        }
    }
    let row = width * 3;
    let mut out = Vec::with_capacity(panels.len() * height * row);
    for r in 0..height {
        for p in panels {
            out.extend_from_slice(&p[r * row..(r + 1) * row]);
        }
    }
    Ok((width * panels.len(), out))
}

/// Boundary probabilities as 8-bit grey levels.
pub fn boundary_bytes(b: &BoundaryMap) -> Vec<u8> {
    b.values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}
