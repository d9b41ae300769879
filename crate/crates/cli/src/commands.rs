use std::fs;
use std::path::{Path, PathBuf};

use mcseg_core::checkpoint;
use mcseg_core::evaluate::{evaluate, predict_labels, EvalOptions, Evaluation};
use mcseg_core::metrics::{MetricsReport, ReportMeta};
use mcseg_core::netpbm;
use mcseg_core::refine::{DEFAULT_MAX_AREA_FRACTION, DEFAULT_THRESHOLD};
use mcseg_core::scenegen::{write_dataset, Manifest, Parts};
use mcseg_core::trainer::{self, checkpoint_name, select_epoch, Batch, RunSummary, CONFIG_FILE};
use mcseg_core::{Dataset, DatasetConfig, Error, Model, Result, Split, TrainConfig, TrainMode};

use crate::benchmark::{self, BenchmarkConfig, Table};
use crate::render;
use crate::run_manifest::{unix_now, RunManifest};
use crate::{load_config, BenchmarkArgs, DatagenArgs, EvalArgs, RenderArgs, TrainArgs};

pub fn datagen(args: &DatagenArgs) -> Result<Manifest> {
    let config: DatasetConfig = load_config(&args.config)?;
    write_dataset(&config, &args.out)
}

fn required(flag: Option<&PathBuf>, fallback: Option<&PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or(fallback)
        .cloned()
        .ok_or_else(|| Error::Config(format!("--{name} is required when the config has no {name}_dir")))
}

pub fn train(args: &TrainArgs) -> Result<RunSummary> {
    let mut config: TrainConfig = load_config(&args.config)?;
    config.validate()?;
    let data = required(args.data.as_ref(), config.data_dir.as_ref(), "data")?;
    let out = required(args.out.as_ref(), config.out_dir.as_ref(), "out")?;
    if args.source_only {
        config.mode = TrainMode::SourceOnly;
    }
    train_run(&config, &data, &out)
}

/// Trains and records a [`RunManifest`] in the run directory.
pub fn train_run(config: &TrainConfig, data: &Path, out: &Path) -> Result<RunSummary> {
    let started = unix_now();
    let summary = trainer::train(config, data, out)?;
    RunManifest::emit(out, "train", config.seed, config, started)?;
    Ok(summary)
}

/// The entropy-selected checkpoint of a run and its epoch.
pub fn run_checkpoint(run: &Path) -> Result<(PathBuf, usize)> {
    let epoch = select_epoch(run)?;
    Ok((run.join(checkpoint_name(epoch)), epoch))
}

fn run_threshold(run: &Path) -> Result<f32> {
    let path = run.join(CONFIG_FILE);
    if !path.is_file() {
        return Ok(DEFAULT_THRESHOLD);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config: TrainConfig =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(config.boundary_threshold)
}

/// Loads a checkpoint, scores it and builds the report.
pub fn score_checkpoint(
    ckpt: &Path,
    ds: &Dataset,
    split: Split,
    refine: Option<f32>,
) -> Result<(Evaluation, MetricsReport)> {
    let (model, header) = checkpoint::load(ckpt)?;
    let opts = EvalOptions {
        refine,
        ..EvalOptions::default()
    };
    let ev = evaluate(&model, ds, split, &opts)?;
    let meta = ReportMeta {
        checkpoint: Some(ckpt.display().to_string()),
        epoch: header.epoch,
        split: Some(split.name().to_string()),
        refine: refine.is_some(),
    };
    let report = MetricsReport::new(
        &ev.scores,
        &ev.confusion,
        &ds.manifest.class_names,
        ev.boundary.as_ref(),
        meta,
    )?;
    Ok((ev, report))
}

pub fn eval(args: &EvalArgs) -> Result<MetricsReport> {
    let (ckpt, default_threshold) = match (&args.run, &args.checkpoint) {
        (Some(run), _) => (run_checkpoint(run)?.0, run_threshold(run)?),
        (None, Some(c)) => (c.clone(), DEFAULT_THRESHOLD),
        (None, None) => return Err(Error::Config("one of --run or --checkpoint is required".into())),
    };
    let refine = args
        .refine
        .then(|| args.boundary_threshold.unwrap_or(default_threshold));
    if let Some(t) = refine {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!("--boundary-threshold must lie in (0, 1], got {t}")));
        }
    }
    let ds = Dataset::open(&args.data)?;
    let (_, report) = score_checkpoint(&ckpt, &ds, args.split, refine)?;
    report.save(&args.report)?;
    Ok(report)
}

/// Writes `{id}_triptych.ppm` (input, prediction, ground truth) for each id,
/// plus `{id}_boundary.pgm` when the model predicts boundaries.
pub fn render_samples(model: &Model, ds: &Dataset, ids: &[String], out: &Path) -> Result<Vec<PathBuf>> {
    let spec = model.spec();
    let parts = Parts {
        hha: spec.fusion.uses_hha(),
        labels: true,
        ..Parts::RGB_ONLY
    };
    let entries = ids
        .iter()
        .map(|id| {
            ds.manifest
                .samples
                .iter()
                .find(|e| &e.id == id)
                .ok_or_else(|| Error::Config(format!("unknown sample id {id:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (h, w) = (ds.manifest.height, ds.manifest.width);
    let mut written = Vec::new();
    for entry in entries {
        let sample = ds.load(entry, parts)?;
        let input = render::image_bytes(&sample.rgb)?;
        let batch = Batch::from_loaded(sample)?;
        let (pred, boundary) = predict_labels(model, &batch, None, DEFAULT_MAX_AREA_FRACTION)?;
        let gt = batch.labels.as_ref().expect("labels requested");
        let (tw, bytes) = render::side_by_side(
            h,
            w,
            &[&input, &render::colorize(&pred), &render::colorize(gt)],
        )?;
        let path = out.join(format!("{}_triptych.ppm", entry.id));
        netpbm::write_ppm(&path, tw, h, &bytes)?;
        written.push(path);
        if let Some(b) = boundary {
            let path = out.join(format!("{}_boundary.pgm", entry.id));
            netpbm::write_pgm8(&path, w, h, &render::boundary_bytes(&b))?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn render(args: &RenderArgs) -> Result<Vec<PathBuf>> {
    let (ckpt, _) = run_checkpoint(&args.run)?;
    let (model, _) = checkpoint::load(&ckpt)?;
    let ds = Dataset::open(&args.data)?;
    render_samples(&model, &ds, &args.ids, &args.out)
}

pub fn benchmark(args: &BenchmarkArgs) -> Result<Table> {
    let config: BenchmarkConfig = load_config(&args.config)?;
    benchmark::run(&config, &args.out)
}
