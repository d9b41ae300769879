//! Segmentation and boundary evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::IGNORE_LABEL;
use crate::error::{contract, Error, Result};
use crate::maps::{BoundaryMap, LabelMap};

/// `counts[i * k + j]` is the number of pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.classes..(i + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        contract!(
            self.classes == other.classes,
            "cannot merge confusion matrices over {} and {} classes",
            self.classes,
            other.classes
        );
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        contract!(
            (pred.height, pred.width) == (gt.height, gt.width),
            "prediction {}x{} and ground truth {}x{} differ in size",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        );
        let k = self.classes;
        for (&p, &t) in pred.values.iter().zip(&gt.values) {
            if t == IGNORE_LABEL {
                continue;
            }
            contract!(
                (t as usize) < k && (p as usize) < k,
                "class id out of range for {} classes (truth {}, prediction {})",
                k,
                t,
                p
            );
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|i| {
                let t = self.row_sum(i);
                (0..self.classes)
                    .map(|j| if t == 0 { 0.0 } else { self.get(i, j) as f64 / t as f64 })
                    .collect()
            })
            .collect()
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    #[serde(rename = "pixAcc")]
    pub pix_acc: f64,
    #[serde(rename = "mAcc")]
    pub mean_acc: f64,
    #[serde(rename = "fwIoU")]
    pub fw_iou: f64,
    #[serde(rename = "mIoU")]
    pub mean_iou: f64,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
}

/// Classes absent from both ground truth and prediction are left out of the
/// class means; a class predicted but never present scores 0.
pub fn seg_scores(cm: &ConfusionMatrix) -> Result<SegScores> {
    let total = cm.total();
    contract!(total > 0, "confusion matrix is empty");
    let k = cm.classes;
    let mut correct = 0u64;
    let (mut acc_sum, mut iou_sum, mut fw_sum, mut present) = (0.0, 0.0, 0.0, 0usize);
    let mut per_class = Vec::with_capacity(k);
    for i in 0..k {
        let n_ii = cm.get(i, i);
        let t_i = cm.row_sum(i);
        let predicted = cm.col_sum(i);
        correct += n_ii;
        if t_i == 0 && predicted == 0 {
            per_class.push(None);
            continue;
        }
        present += 1;
        let union = t_i + predicted - n_ii;
        let iou = n_ii as f64 / union as f64;
        if t_i > 0 {
            acc_sum += n_ii as f64 / t_i as f64;
        }
        iou_sum += iou;
        fw_sum += t_i as f64 * iou;
        per_class.push(Some(iou));
    }
    Ok(SegScores {
        pix_acc: correct as f64 / total as f64,
        mean_acc: acc_sum / present as f64,
        fw_iou: fw_sum / total as f64,
        mean_iou: iou_sum / present as f64,
        per_class_iou: per_class,
    })
}

pub const DEFAULT_MATCH_RADIUS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

impl PrPoint {
    pub fn f1(&self) -> f64 {
        f1(self.precision, self.recall)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScores {
    pub ods: f64,
    pub ois: f64,
    pub ap: f64,
    pub pr_curve: Vec<PrPoint>,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn thresholds() -> impl Iterator<Item = f64> {
    (1..100).map(|i| i as f64 / 100.0)
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    matched: u64,
    predicted: u64,
    truth: u64,
}

impl Counts {
    fn precision(&self) -> f64 {
        if self.predicted == 0 {
            1.0
        } else {
            self.matched as f64 / self.predicted as f64
        }
    }

    fn recall(&self) -> f64 {
        if self.truth == 0 {
            1.0
        } else {
            self.matched as f64 / self.truth as f64
        }
    }
}

/// Greedy one-to-one matching: predicted edge pixels in raster order each
/// claim the first free truth pixel (raster order) within Chebyshev `radius`.
fn match_edges(pred: &[bool], truth: &[bool], h: usize, w: usize, radius: usize) -> Counts {
    let mut taken = vec![false; truth.len()];
    let mut c = Counts {
        truth: truth.iter().filter(|&&t| t).count() as u64,
        ..Counts::default()
    };
    for (i, _) in pred.iter().enumerate().filter(|(_, &p)| p) {
        c.predicted += 1;
        let (r, q) = (i / w, i % w);
        let rows = r.saturating_sub(radius)..(r + radius + 1).min(h);
        'search: for rr in rows {
            for qq in q.saturating_sub(radius)..(q + radius + 1).min(w) {
                let j = rr * w + qq;
                if truth[j] && !taken[j] {
                    taken[j] = true;
                    c.matched += 1;
                    break 'search;
                }
            }
        }
    }
    c
}

pub fn boundary_scores(
    preds: &[BoundaryMap],
    gts: &[BoundaryMap],
    radius: usize,
) -> Result<BoundaryScores> {
    contract!(!preds.is_empty(), "no boundary maps to evaluate");
    contract!(
        preds.len() == gts.len(),
        "{} predictions for {} ground-truth maps",
        preds.len(),
        gts.len()
    );
    let ts: Vec<f64> = thresholds().collect();
    let mut global = vec![Counts::default(); ts.len()];
    let mut ois_sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        contract!(
            (p.height, p.width) == (g.height, g.width),
            "boundary maps {}x{} and {}x{} differ in size",
            p.height,
            p.width,
            g.height,
            g.width
        );
        let truth = g.edges();
        let mut best = 0.0f64;
        for (slot, &t) in global.iter_mut().zip(&ts) {
            let mask: Vec<bool> = p.values.iter().map(|&v| v as f64 >= t).collect();
            let c = match_edges(&mask, &truth, p.height, p.width, radius);
            best = best.max(f1(c.precision(), c.recall()));
            slot.matched += c.matched;
            slot.predicted += c.predicted;
            slot.truth += c.truth;
        }
        ois_sum += best;
    }
    let pr_curve: Vec<PrPoint> = global
        .iter()
        .zip(&ts)
        .map(|(c, &threshold)| PrPoint {
            threshold,
            precision: c.precision(),
            recall: c.recall(),
        })
        .collect();
    let ods = pr_curve.iter().map(PrPoint::f1).fold(0.0, f64::max);
    Ok(BoundaryScores {
        ods,
        ois: ois_sum / preds.len() as f64,
        ap: average_precision(&pr_curve),
        pr_curve,
    })
}

/// Trapezoidal area under precision over recall, anchored at recall 0 with
/// the precision of the lowest-recall point.
fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let Some(&(_, p0)) = pts.first() else {
        return 0.0;
    };
    let mut area = 0.0;
    let mut prev = (0.0, p0);
    for &(r, p) in &pts {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    area
}

fn pct(v: f64) -> f64 {
    (v * 1000.0).round() / 10.0
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    #[serde(rename = "pixAcc")]
    pub pix_acc: f64,
    #[serde(rename = "mAcc")]
    pub mean_acc: f64,
    #[serde(rename = "fwIoU")]
    pub fw_iou: f64,
    #[serde(rename = "mIoU")]
    pub mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySummary {
    pub ods: f64,
    pub ois: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: Option<String>,
    pub epoch: Option<usize>,
    pub split: Option<String>,
    pub refine: bool,
}

/// Evaluation summary; scores are percentages with one decimal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scores: ScoreTable,
    pub per_class_iou: BTreeMap<String, Option<f64>>,
    pub confusion_row_normalized: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<BoundarySummary>,
    pub meta: ReportMeta,
}

impl MetricsReport {
    pub fn new(
        scores: &SegScores,
        cm: &ConfusionMatrix,
        class_names: &[String],
        boundary: Option<&BoundaryScores>,
        meta: ReportMeta,
    ) -> Result<Self> {
        contract!(
            class_names.len() == cm.classes && scores.per_class_iou.len() == cm.classes,
            "{} class names, {} IoU entries and a {}-class confusion matrix",
            class_names.len(),
            scores.per_class_iou.len(),
            cm.classes
        );
        Ok(Self {
            scores: ScoreTable {
                pix_acc: pct(scores.pix_acc),
                mean_acc: pct(scores.mean_acc),
                fw_iou: pct(scores.fw_iou),
                mean_iou: pct(scores.mean_iou),
            },
            per_class_iou: class_names
                .iter()
                .cloned()
                .zip(scores.per_class_iou.iter().map(|v| v.map(pct)))
                .collect(),
            confusion_row_normalized: cm.row_normalized(),
            boundary: boundary.map(|b| BoundarySummary {
                ods: round3(b.ods),
                ois: round3(b.ois),
                ap: round3(b.ap),
            }),
            meta,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
