//! Per-pixel label and boundary maps.

use serde::{Deserialize, Serialize};

use crate::autodiff::IGNORE_LABEL;
use crate::error::{contract, Result};

/// Semantic class id per pixel, row-major; [`IGNORE_LABEL`] marks void pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        contract!(
            values.len() == height * width,
            "label map {}x{} needs {} values, got {}",
            height,
            width,
            height * width,
            values.len()
        );
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            values: vec![class; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    /// Fails if any non-ignored value is `>= classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        if let Some(&bad) = self
            .values
            .iter()
            .find(|&&v| v != IGNORE_LABEL && v as usize >= classes)
        {
            contract!(false, "class id {} out of range for {} classes", bad, classes);
        }
        Ok(())
    }
}

/// Boundary strength per pixel in `[0, 1]`. Ground truth uses exactly 0 and 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl BoundaryMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        contract!(
            values.len() == height * width,
            "boundary map {}x{} needs {} values, got {}",
            height,
            width,
            height * width,
            values.len()
        );
        contract!(
            values.iter().all(|v| (0.0..=1.0).contains(v)),
            "boundary values must lie in [0, 1]"
        );
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_mask(height: usize, width: usize, mask: &[bool]) -> Self {
        Self {
            height,
            width,
            values: mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// `value >= 0.5`, the reading used for binary ground truth.
    pub fn edges(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v >= 0.5).collect()
    }
}
