//! Variant matrix runs and the consolidated results table.

use std::fs;
use std::path::{Path, PathBuf};

use mcseg_core::evaluate::sobel_baseline;
use mcseg_core::metrics::{BoundaryScores, BoundarySummary, ScoreTable, DEFAULT_MATCH_RADIUS};
use mcseg_core::scenegen::write_dataset;
use mcseg_core::{
    Dataset, DatasetConfig, Error, FusionKind, Result, Split, TaskSet, TrainConfig, TrainMode,
};
use serde::{Deserialize, Serialize};

use crate::commands::{run_checkpoint, score_checkpoint, train_run};

pub const TABLE_CSV: &str = "table.csv";
pub const SEEDS_CSV: &str = "seeds.csv";
pub const BOUNDARY_CSV: &str = "boundary.csv";
pub const TABLE_JSON: &str = "table.json";
pub const TABLE_HEADER: [&str; 5] = ["variant", "pixAcc", "mAcc", "fwIoU", "mIoU"];
pub const SEEDS_HEADER: [&str; 10] = [
    "variant", "seed", "pixAcc", "mAcc", "fwIoU", "mIoU", "ODS", "OIS", "AP", "epoch",
];
pub const BOUNDARY_HEADER: [&str; 4] = ["variant", "ODS", "OIS", "AP"];
pub const SOBEL_ROW: &str = "Sobel baseline";

fn rgb_only() -> FusionKind {
    FusionKind::RgbOnly
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    /// Row label; derived from the other fields when absent.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default = "rgb_only")]
    pub fusion: FusionKind,
    #[serde(default)]
    pub tasks: TaskSet,
    /// Score with boundary-guided refinement (triple models only).
    #[serde(default)]
    pub refine: bool,
}

fn fusion_label(f: FusionKind) -> &'static str {
    match f {
        FusionKind::RgbOnly => "RGB",
        FusionKind::HhaOnly => "HHA",
        FusionKind::Early => "EarlyFusion",
        FusionKind::LateAdd => "LateFusion:Add",
        FusionKind::LateConcat => "LateFusion:Concat",
        FusionKind::ScoreAdd => "ScoreFusion:Add",
        FusionKind::ScoreConcatConv => "ScoreFusion:ConcatConv",
        FusionKind::ScoreGate => "ScoreFusion:Gate",
        FusionKind::Fusenet => "FuseNet",
    }
}

impl Variant {
    pub fn new(mode: TrainMode, fusion: FusionKind, tasks: TaskSet, refine: bool) -> Self {
        Self {
            name: None,
            mode,
            fusion,
            tasks,
            refine,
        }
    }

    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let model = match self.tasks {
            TaskSet::SegOnly => fusion_label(self.fusion).to_string(),
            TaskSet::Dual => "Multitask:Dual".to_string(),
            TaskSet::Triple => "Multitask:Triple".to_string(),
        };
        let refine = if self.refine { "+Refine" } else { "" };
        match self.mode {
            TrainMode::Adapt => format!("Adapt ({model}{refine})"),
            TrainMode::SourceOnly => format!("Source Only ({model}{refine})"),
            TrainMode::Oracle => format!("Oracle (Target Only, {model}{refine})"),
        }
    }

    fn slug(&self) -> String {
        let mut s: String = self
            .label()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        while s.contains("__") {
            s = s.replace("__", "_");
        }
        s.trim_matches('_').to_string()
    }

    fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            fusion: self.fusion,
            tasks: self.tasks,
            seed,
            data_dir: None,
            out_dir: None,
            ..base.clone()
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn target_test() -> Split {
    Split::TargetTest
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Generated into `<out>/data` unless `data` points at an existing dataset.
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Shared training settings; each variant overrides mode, fusion and tasks.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    #[serde(default = "target_test")]
    pub split: Split,
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("benchmark needs at least one variant and one seed".into()));
        }
        for v in &self.variants {
            if v.refine && !v.tasks.has_boundary() {
                return Err(Error::Config(format!(
                    "variant {:?} refines without a boundary head",
                    v.label()
                )));
            }
            v.train_config(&self.train, 0).validate()?;
        }
        Ok(())
    }
}

/// One training run of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub scores: Option<ScoreTable>,
    pub boundary: Option<BoundarySummary>,
    /// Entropy-selected epoch that was scored.
    pub epoch: Option<usize>,
    pub error: Option<String>,
}

impl SeedResult {
    fn failed(seed: u64, error: &Error) -> Self {
        Self {
            seed,
            scores: None,
            boundary: None,
            epoch: None,
            error: Some(error.to_string()),
        }
    }
}

/// One table row: metric-wise medians over the successful seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: String,
    /// Rows trained on target labels are reference points, not results.
    pub diagnostic: bool,
    pub scores: Option<ScoreTable>,
    pub boundary: Option<BoundarySummary>,
    pub seeds: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub split: Split,
    pub seeds: Vec<u64>,
    pub rows: Vec<TableRow>,
    /// Sobel edges scored like a boundary head; present when some variant
    /// predicts boundaries.
    pub sobel: Option<BoundarySummary>,
}

fn csv_string(records: Vec<Vec<String>>) -> Result<String> {
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn score_fields(s: Option<&ScoreTable>) -> [String; 4] {
    let f = |g: fn(&ScoreTable) -> f64| s.map(|s| format!("{:.1}", g(s))).unwrap_or_default();
    [f(|s| s.pix_acc), f(|s| s.mean_acc), f(|s| s.fw_iou), f(|s| s.mean_iou)]
}

fn boundary_fields(b: Option<&BoundarySummary>) -> [String; 3] {
    let f = |g: fn(&BoundarySummary) -> f64| b.map(|b| format!("{:.3}", g(b))).unwrap_or_default();
    [f(|b| b.ods), f(|b| b.ois), f(|b| b.ap)]
}

impl Table {
    pub fn row(&self, variant: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// One row per variant with median scores.
    pub fn to_csv(&self) -> Result<String> {
        let mut records = vec![TABLE_HEADER.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let mut rec = vec![r.variant.clone()];
            rec.extend(score_fields(r.scores.as_ref()));
            records.push(rec);
        }
        csv_string(records)
    }

    /// One row per variant and seed.
    pub fn seeds_csv(&self) -> Result<String> {
        let mut records = vec![SEEDS_HEADER.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            for s in &r.seeds {
                let mut rec = vec![r.variant.clone(), s.seed.to_string()];
                rec.extend(score_fields(s.scores.as_ref()));
                rec.extend(boundary_fields(s.boundary.as_ref()));
                rec.push(s.epoch.map(|e| e.to_string()).unwrap_or_default());
                records.push(rec);
            }
        }
        csv_string(records)
    }

    /// Boundary scores of the boundary-predicting variants and the Sobel
    /// baseline; `None` when no variant predicts boundaries.
    pub fn boundary_csv(&self) -> Result<Option<String>> {
        let Some(sobel) = &self.sobel else {
            return Ok(None);
        };
        let mut records = vec![BOUNDARY_HEADER.iter().map(|s| s.to_string()).collect()];
        let mut push = |name: &str, b: Option<&BoundarySummary>| {
            let mut rec = vec![name.to_string()];
            rec.extend(boundary_fields(b));
            records.push(rec);
        };
        push(SOBEL_ROW, Some(sobel));
        for r in self.rows.iter().filter(|r| r.boundary.is_some()) {
            push(&r.variant, r.boundary.as_ref());
        }
        csv_string(records).map(Some)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write(TABLE_CSV, self.to_csv()?)?;
        write(SEEDS_CSV, self.seeds_csv()?)?;
        if let Some(b) = self.boundary_csv()? {
            write(BOUNDARY_CSV, b)?;
        }
        write(TABLE_JSON, serde_json::to_string_pretty(self)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(TABLE_JSON);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    Some(m)
}

fn round_to(v: f64, places: i32) -> f64 {
    let s = 10f64.powi(places);
    (v * s).round() / s
}

fn summarize_boundary(b: &BoundaryScores) -> BoundarySummary {
    BoundarySummary {
        ods: round_to(b.ods, 3),
        ois: round_to(b.ois, 3),
        ap: round_to(b.ap, 3),
    }
}

fn aggregate(variant: &Variant, seeds: Vec<SeedResult>) -> TableRow {
    let scores: Vec<&ScoreTable> = seeds.iter().filter_map(|r| r.scores.as_ref()).collect();
    let pick = |f: fn(&ScoreTable) -> f64| median(scores.iter().map(|s| f(s)).collect());
    let scores = pick(|s| s.mean_iou).map(|miou| ScoreTable {
        pix_acc: round_to(pick(|s| s.pix_acc).unwrap_or(0.0), 1),
        mean_acc: round_to(pick(|s| s.mean_acc).unwrap_or(0.0), 1),
        fw_iou: round_to(pick(|s| s.fw_iou).unwrap_or(0.0), 1),
        mean_iou: round_to(miou, 1),
    });
    let bs: Vec<&BoundarySummary> = seeds.iter().filter_map(|r| r.boundary.as_ref()).collect();
    let pickb = |f: fn(&BoundarySummary) -> f64| median(bs.iter().map(|b| f(b)).collect());
    let boundary = pickb(|b| b.ods).map(|ods| BoundarySummary {
        ods: round_to(ods, 3),
        ois: round_to(pickb(|b| b.ois).unwrap_or(0.0), 3),
        ap: round_to(pickb(|b| b.ap).unwrap_or(0.0), 3),
    });
    TableRow {
        variant: variant.label(),
        diagnostic: variant.mode == TrainMode::Oracle,
        scores,
        boundary,
        seeds,
    }
}

fn run_variant(
    variant: &Variant,
    config: &BenchmarkConfig,
    ds: &Dataset,
    seed: u64,
    out: &Path,
) -> Result<SeedResult> {
    let train = variant.train_config(&config.train, seed);
    let run_dir = out.join("runs").join(variant.slug()).join(format!("seed{seed}"));
    train_run(&train, ds.root(), &run_dir)?;
    let (ckpt, epoch) = run_checkpoint(&run_dir)?;
    let refine = variant.refine.then_some(train.boundary_threshold);
    let (_, report) = score_checkpoint(&ckpt, ds, config.split, refine)?;
    Ok(SeedResult {
        seed,
        scores: Some(report.scores),
        boundary: report.boundary,
        epoch: Some(epoch),
        error: None,
    })
}

/// Trains every variant for every seed, scores the entropy-selected
/// checkpoint and writes `table.csv` and `table.json` under `out`. Failed
/// seeds leave blank entries carrying the error message.
pub fn run(config: &BenchmarkConfig, out: &Path) -> Result<Table> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data_dir = match &config.data {
        Some(d) => d.clone(),
        None => {
            let d = out.join("data");
            write_dataset(&config.dataset, &d)?;
            d
        }
    };
    let ds = Dataset::open(&data_dir)?;
    let mut rows = Vec::new();
    for variant in &config.variants {
        let seeds = config
            .seeds
            .iter()
            .map(|&seed| {
                run_variant(variant, config, &ds, seed, out).unwrap_or_else(|e| {
                    log::warn!("{} seed {seed} failed: {e}", variant.label());
                    SeedResult::failed(seed, &e)
                })
            })
            .collect();
        rows.push(aggregate(variant, seeds));
    }
    let sobel = if config.variants.iter().any(|v| v.tasks.has_boundary()) {
        match sobel_baseline(&ds, config.split, DEFAULT_MATCH_RADIUS) {
            Ok(b) => Some(summarize_boundary(&b)),
            Err(e) => {
                log::warn!("Sobel baseline failed: {e}");
                None
            }
        }
    } else {
        None
    };
    let table = Table {
        split: config.split,
        seeds: config.seeds.clone(),
        rows,
        sobel,
    };
    table.save(out)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_table_naming() {
        let v = Variant::new(TrainMode::Adapt, FusionKind::RgbOnly, TaskSet::Triple, true);
        assert_eq!(v.label(), "Adapt (Multitask:Triple+Refine)");
        assert_eq!(v.slug(), "adapt_multitask_triple_refine");
        let v = Variant::new(TrainMode::SourceOnly, FusionKind::RgbOnly, TaskSet::SegOnly, false);
        assert_eq!(v.label(), "Source Only (RGB)");
        let v = Variant::new(TrainMode::Adapt, FusionKind::Early, TaskSet::SegOnly, false);
        assert_eq!(v.label(), "Adapt (EarlyFusion)");
    }

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    #[test]
    fn refine_without_boundary_head_is_rejected() {
        let cfg = BenchmarkConfig {
            dataset: DatasetConfig::default(),
            data: None,
            train: TrainConfig::default(),
            seeds: vec![0],
            variants: vec![Variant::new(TrainMode::Adapt, FusionKind::RgbOnly, TaskSet::SegOnly, true)],
            split: Split::TargetTest,
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
