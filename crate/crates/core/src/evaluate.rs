//! Model evaluation over a dataset split.

use crate::error::{Error, Result};
use crate::maps::{BoundaryMap, LabelMap};
use crate::metrics::{
    boundary_scores, BoundaryScores, ConfusionMatrix, SegScores, DEFAULT_MATCH_RADIUS,
};
use crate::models::Model;
use crate::refine::{refine_with_boundaries, sobel_edges, DEFAULT_MAX_AREA_FRACTION};
use crate::scenegen::{Dataset, Parts, Split};
use crate::trainer::Batch;
use crate::metrics;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Boundary threshold for refinement; `None` disables it.
    pub refine: Option<f32>,
    pub max_area_fraction: f64,
    pub match_radius: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            refine: None,
            max_area_fraction: DEFAULT_MAX_AREA_FRACTION,
            match_radius: DEFAULT_MATCH_RADIUS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub scores: SegScores,
    /// Learned boundary head against ground truth (boundary models only).
    pub boundary: Option<BoundaryScores>,
}

/// Final label map for one image, refined when requested.
pub fn predict_labels(model: &Model, batch: &Batch, refine: Option<f32>, max_area: f64) -> Result<(LabelMap, Option<BoundaryMap>)> {
    let (_, _, h, w) = batch.rgb.dims4()?;
    let p = model.predict(&batch.rgb, batch.hha.as_ref())?;
    let labels = LabelMap::new(h, w, p.labels)?;
    let boundary = p
        .boundary
        .map(|t| BoundaryMap::new(h, w, t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect()))
        .transpose()?;
    let labels = match (refine, &boundary) {
        (None, _) => labels,
        (Some(t), Some(b)) => refine_with_boundaries(&labels, b, t, max_area)?,
        (Some(_), None) => {
            return Err(Error::Semantic(format!(
                "refinement needs a model with a boundary head; this one has task set {}",
                model.spec().tasks.name()
            )))
        }
    };
    Ok((labels, boundary))
}

pub fn evaluate(model: &Model, ds: &Dataset, split: Split, opts: &EvalOptions) -> Result<Evaluation> {
    let spec = model.spec();
    if opts.refine.is_some() && !spec.tasks.has_boundary() {
        return Err(Error::Semantic(format!(
            "--refine requires a triple-task model, checkpoint has task set {}",
            spec.tasks.name()
        )));
    }
    if spec.classes != ds.manifest.classes {
        return Err(Error::Semantic(format!(
            "model predicts {} classes, dataset has {}",
            spec.classes, ds.manifest.classes
        )));
    }
    let parts = Parts {
        hha: spec.fusion.uses_hha(),
        depth: false,
        labels: true,
        boundaries: spec.tasks.has_boundary(),
    };
    let entries = nonempty(ds, split)?;
    let mut cm = ConfusionMatrix::new(spec.classes);
    let (mut pred_b, mut gt_b) = (Vec::new(), Vec::new());
    for e in entries {
        let mut sample = ds.load(e, parts)?;
        let gt_boundary = sample.boundaries.take();
        let batch = Batch::from_loaded(sample)?;
        let (labels, boundary) = predict_labels(model, &batch, opts.refine, opts.max_area_fraction)?;
        cm.accumulate(&labels, batch.labels.as_ref().expect("labels requested"))?;
        if let (Some(b), Some(gt)) = (boundary, gt_boundary) {
            pred_b.push(b);
            gt_b.push(gt);
        }
    }
    let scores = metrics::seg_scores(&cm)?;
    let boundary = (!pred_b.is_empty())
        .then(|| boundary_scores(&pred_b, &gt_b, opts.match_radius))
        .transpose()?;
    Ok(Evaluation {
        confusion: cm,
        scores,
        boundary,
    })
}

/// Sobel edges of the input images scored against the true boundaries.
pub fn sobel_baseline(ds: &Dataset, split: Split, match_radius: usize) -> Result<BoundaryScores> {
    let parts = Parts {
        boundaries: true,
        ..Parts::RGB_ONLY
    };
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for e in nonempty(ds, split)? {
        let s = ds.load(e, parts)?;
        pred.push(sobel_edges(&s.rgb)?);
        gt.push(s.boundaries.expect("boundaries requested"));
    }
    boundary_scores(&pred, &gt, match_radius)
}

fn nonempty(ds: &Dataset, split: Split) -> Result<Vec<&crate::scenegen::ManifestEntry>> {
    let entries = ds.entries(split);
    if entries.is_empty() {
        return Err(Error::Contract(format!("split {} is empty", split.name())));
    }
    Ok(entries)
}
