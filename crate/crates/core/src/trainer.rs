//! Adversarial two-classifier training.
//!
//! Each iteration runs three steps. Step A fits everything to labelled source
//! data. Step B freezes the generator and trains the classifiers to agree on
//! the source while disagreeing on a target image. Step C freezes the
//! classifiers and trains the generator to remove that disagreement.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::error::{contract, Error, Result};
use crate::losses::{self, DiscrepancyNorm, TaskLosses};
use crate::maps::{BoundaryMap, LabelMap};
use crate::models::{build_model, FusionKind, Model, ModelSpec, ParamGroups, TaskSet};
use crate::optim::{Binder, ParamId, SgdMomentum};
use crate::rng;
use crate::scenegen::{Dataset, LoadedSample, Parts, Split};
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "log.csv";
pub const DYNAMICS_FILE: &str = "dynamics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_HEADER: &str = "epoch,L_seg_src,L_adv_tgt,L_depth,L_boundary,target_entropy";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch}.mcseg")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Source labels plus unlabelled target images.
    #[default]
    Adapt,
    /// Source labels only; target files are never opened.
    SourceOnly,
    /// Target-train labels only, as an upper reference.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub fusion: FusionKind,
    pub tasks: TaskSet,
    pub width: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub iters_per_epoch: usize,
    pub epochs: usize,
    pub num_c_steps: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub discrepancy: DiscrepancyNorm,
    /// Scales the discrepancy term of step B; 0 leaves plain source training.
    pub adv_weight: f32,
    pub boundary_threshold: f32,
    /// Target-train images used for the per-epoch entropy.
    pub entropy_samples: usize,
    /// Iterations between push-pull probes; 0 disables probing.
    pub probe_every: usize,
    /// Verify after every step that frozen parameter groups kept their bytes.
    pub check_partitions: bool,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            fusion: FusionKind::RgbOnly,
            tasks: TaskSet::SegOnly,
            width: 16,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 1,
            iters_per_epoch: 500,
            epochs: 10,
            num_c_steps: 4,
            seed: 0,
            mode: TrainMode::Adapt,
            discrepancy: DiscrepancyNorm::L1,
            adv_weight: 1.0,
            boundary_threshold: 0.5,
            entropy_samples: 32,
            probe_every: 5,
            check_partitions: cfg!(debug_assertions),
            data_dir: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size != 1 {
            return bad(format!(
                "only batch_size 1 is supported, got {}",
                self.batch_size
            ));
        }
        if self.iters_per_epoch == 0 || self.epochs == 0 || self.width == 0 {
            return bad("iters_per_epoch, epochs and width must be positive".into());
        }
        if !(self.boundary_threshold > 0.0 && self.boundary_threshold <= 1.0) {
            return bad(format!(
                "boundary_threshold must lie in (0, 1], got {}",
                self.boundary_threshold
            ));
        }
        if self.tasks != TaskSet::SegOnly && self.fusion != FusionKind::RgbOnly {
            return bad(format!(
                "multitask training needs rgb_only fusion, got {}",
                self.fusion
            ));
        }
        Ok(())
    }

    pub fn model_spec(&self, classes: usize) -> ModelSpec {
        ModelSpec {
            fusion: self.fusion,
            tasks: self.tasks,
            classes,
            width: self.width,
        }
    }

    fn parts(&self, labelled: bool) -> Parts {
        let multitask = self.tasks != TaskSet::SegOnly;
        Parts {
            hha: self.fusion.uses_hha() || multitask,
            depth: false,
            labels: labelled,
            boundaries: labelled && self.tasks.has_boundary(),
        }
    }
}

/// One training image as network-ready tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `1×3×H×W`.
    pub rgb: Tensor,
    pub hha: Option<Tensor>,
    pub labels: Option<LabelMap>,
    pub boundaries: Option<BoundaryMap>,
}

impl Batch {
    pub fn new(rgb: Tensor, hha: Option<Tensor>) -> Result<Self> {
        let as4 = |t: Tensor| -> Result<Tensor> {
            match *t.shape() {
                [c, h, w] => t.reshape([1, c, h, w]),
                _ => Ok(t),
            }
        };
        Ok(Self {
            rgb: as4(rgb)?,
            hha: hha.map(as4).transpose()?,
            labels: None,
            boundaries: None,
        })
    }

    pub fn from_loaded(s: LoadedSample) -> Result<Self> {
        let mut b = Self::new(s.rgb, s.hha)?;
        b.labels = s.labels;
        b.boundaries = s.boundaries;
        Ok(b)
    }

    fn labels(&self) -> Result<&LabelMap> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::Contract("source batch has no labels".into()))
    }

    fn hha(&self, why: &str) -> Result<&Tensor> {
        self.hha
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("batch has no HHA ({why})")))
    }
}

/// Scalar losses reported by step A.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepALosses {
    pub seg: f64,
    pub depth: Option<f64>,
    pub boundary: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepBLosses {
    pub seg: f64,
    pub adv: f64,
}

#[derive(Clone, Debug)]
struct GroupOptimizers {
    generator: SgdMomentum,
    classifier: SgdMomentum,
    heads: SgdMomentum,
    uncertainty: SgdMomentum,
}

/// Model plus optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model,
    groups: ParamGroups,
    opts: GroupOptimizers,
    norm: DiscrepancyNorm,
    adv_weight: f32,
    check_partitions: bool,
    iteration: usize,
}

fn cross_entropy_pair(g: &mut Graph, logits: [crate::Var; 2], labels: &LabelMap) -> Result<crate::Var> {
    let a = losses::softmax_cross_entropy(g, logits[0], labels)?;
    let b = losses::softmax_cross_entropy(g, logits[1], labels)?;
    g.add(a, b)
}

impl Trainer {
    pub fn new(config: &TrainConfig, classes: usize) -> Result<Self> {
        let spec = config.model_spec(classes);
        let model = build_model(spec, &mut rng::stream(config.seed, "init"))?;
        Self::from_model(model, config)
    }

    pub fn from_model(model: Model, config: &TrainConfig) -> Result<Self> {
        let opt = || SgdMomentum::new(config.lr, config.momentum);
        Ok(Self {
            groups: model.parameter_groups().clone(),
            model,
            opts: GroupOptimizers {
                generator: opt()?,
                classifier: opt()?,
                heads: opt()?,
                uncertainty: opt()?,
            },
            norm: config.discrepancy,
            adv_weight: config.adv_weight,
            check_partitions: config.check_partitions,
            iteration: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn groups(&self) -> &ParamGroups {
        &self.groups
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn digest(&self, ids: &[ParamId]) -> [u8; 32] {
        self.model.params().digest(ids)
    }

    fn frozen_digest(&self, trained: &[ParamId]) -> Option<[u8; 32]> {
        self.check_partitions.then(|| {
            let frozen: Vec<ParamId> = self
                .groups
                .all()
                .into_iter()
                .filter(|id| !trained.contains(id))
                .collect();
            self.digest(&frozen)
        })
    }

    fn verify_frozen(&self, before: Option<[u8; 32]>, trained: &[ParamId], step: &str) -> Result<()> {
        if before.is_some() && before != self.frozen_digest(trained) {
            return Err(Error::Semantic(format!(
                "{step} modified parameters outside its group"
            )));
        }
        Ok(())
    }

    /// Supervised step on every parameter group. Multitask models also need
    /// a target batch for the target-domain depth term.
    pub fn step_a(&mut self, src: &Batch, tgt: Option<&Batch>) -> Result<StepALosses> {
        let tasks = self.model.spec().tasks;
        let trainable = self.groups.all();
        let mut g = Graph::new();
        let (report, grads) = {
            let mut b = Binder::new(self.model.params(), &trainable);
            let multitask = tasks != TaskSet::SegOnly;
            let out = self
                .model
                .forward(&mut g, &mut b, &src.rgb, src.hha.as_ref(), multitask)?;
            let seg = cross_entropy_pair(&mut g, out.logits, src.labels()?)?;
            let mut report = StepALosses::default();
            let loss = if multitask {
                let tgt = tgt.ok_or_else(|| {
                    Error::Contract("multitask step A needs a target batch".into())
                })?;
                let src_hha = g.constant(src.hha("source depth target")?.clone());
                let depth_src = losses::depth_mse(&mut g, out.depth.expect("depth head"), src_hha)?;
                let tgt_out = self.model.forward(&mut g, &mut b, &tgt.rgb, None, true)?;
                let tgt_hha = g.constant(tgt.hha("target depth target")?.clone());
                let depth_tgt =
                    losses::depth_mse(&mut g, tgt_out.depth.expect("depth head"), tgt_hha)?;
                let boundary_src = if tasks.has_boundary() {
                    let gt = src.boundaries.as_ref().ok_or_else(|| {
                        Error::Contract("triple step A needs source boundaries".into())
                    })?;
                    let mut sum = None;
                    for &z in &out.boundary_logits {
                        let l = losses::balanced_bce(&mut g, z, gt)?;
                        sum = Some(match sum {
                            None => l,
                            Some(s) => g.add(s, l)?,
                        });
                    }
                    let n = out.boundary_logits.len() as f64;
                    Some(g.scale(sum.expect("boundary taps"), 1.0 / n)?)
                } else {
                    None
                };
                let s = self
                    .model
                    .uncertainty()
                    .expect("multitask model has uncertainty parameters")
                    .bind(&mut b, &mut g);
                let total = losses::multitask_total(
                    &mut g,
                    &TaskLosses {
                        seg_src: seg,
                        depth_src: Some(depth_src),
                        depth_tgt: Some(depth_tgt),
                        boundary_src,
                    },
                    &s,
                    tasks,
                )?;
                report.depth = Some(g.value(depth_src).item() as f64);
                report.boundary = boundary_src.map(|v| g.value(v).item() as f64);
                total
            } else {
                seg
            };
            report.seg = g.value(seg).item() as f64;
            report.total = g.value(loss).item() as f64;
            g.backward(loss)?;
            (report, b.gradients(&g))
        };
        let store = self.model.params_mut();
        self.opts.generator.step(store, &grads, &self.groups.generator);
        self.opts.classifier.step(store, &grads, &self.groups.classifier);
        self.opts.heads.step(store, &grads, &self.groups.heads);
        self.opts
            .uncertainty
            .step(store, &grads, &self.groups.uncertainty);
        Ok(report)
    }

    fn target_discrepancy(&self, g: &mut Graph, b: &mut Binder<'_>, tgt: &Batch) -> Result<crate::Var> {
        let out = self.model.forward(g, b, &tgt.rgb, tgt.hha.as_ref(), false)?;
        let p1 = g.softmax_channel(out.logits[0])?;
        let p2 = g.softmax_channel(out.logits[1])?;
        losses::discrepancy(g, p1, p2, self.norm)
    }

    /// Classifier-only step: fit the source, maximize target discrepancy.
    pub fn step_b(&mut self, src: &Batch, tgt: &Batch) -> Result<StepBLosses> {
        let ids = self.groups.classifier.clone();
        let before = self.frozen_digest(&ids);
        let mut g = Graph::new();
        let (report, grads) = {
            let mut b = Binder::new(self.model.params(), &ids);
            let out = self
                .model
                .forward(&mut g, &mut b, &src.rgb, src.hha.as_ref(), false)?;
            let seg = cross_entropy_pair(&mut g, out.logits, src.labels()?)?;
            let adv = self.target_discrepancy(&mut g, &mut b, tgt)?;
            let neg = g.scale(adv, -(self.adv_weight as f64))?;
            let loss = g.add(seg, neg)?;
            g.backward(loss)?;
            let report = StepBLosses {
                seg: g.value(seg).item() as f64,
                adv: g.value(adv).item() as f64,
            };
            (report, b.gradients(&g))
        };
        self.opts
            .classifier
            .step(self.model.params_mut(), &grads, &ids);
        self.verify_frozen(before, &ids, "step B")?;
        Ok(report)
    }

    /// `steps` generator-only updates minimizing target discrepancy. Returns
    /// the discrepancy seen before each update.
    pub fn step_c(&mut self, tgt: &Batch, steps: usize) -> Result<Vec<f64>> {
        let ids = self.groups.generator.clone();
        let before = self.frozen_digest(&ids);
        let mut seen = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut g = Graph::new();
            let grads = {
                let mut b = Binder::new(self.model.params(), &ids);
                let adv = self.target_discrepancy(&mut g, &mut b, tgt)?;
                seen.push(g.value(adv).item() as f64);
                g.backward(adv)?;
                b.gradients(&g)
            };
            self.opts
                .generator
                .step(self.model.params_mut(), &grads, &ids);
        }
        self.verify_frozen(before, &ids, "step C")?;
        Ok(seen)
    }

    /// Classifier discrepancy on `tgt` under the current weights.
    pub fn discrepancy(&self, tgt: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(self.model.params());
        let v = self.target_discrepancy(&mut g, &mut b, tgt)?;
        Ok(g.value(v).item() as f64)
    }

    pub fn mean_entropy(&self, batches: &[Batch]) -> Result<f64> {
        contract!(!batches.is_empty(), "entropy needs at least one image");
        let mut total = 0.0;
        for t in batches {
            let p = self.model.predict(&t.rgb, t.hha.as_ref())?;
            let mean = Tensor::new(
                p.probs[0].shape().to_vec(),
                p.probs[0]
                    .data()
                    .iter()
                    .zip(p.probs[1].data())
                    .map(|(a, b)| (a + b) / 2.0)
                    .collect(),
            )?;
            total += losses::mean_entropy(&mean)?;
        }
        Ok(total / batches.len() as f64)
    }

    /// One full A→B→C iteration.
    pub fn iterate(&mut self, src: &Batch, tgt: &Batch, num_c_steps: usize) -> Result<IterationLosses> {
        let a = self.step_a(src, Some(tgt))?;
        let b = self.step_b(src, tgt)?;
        let c = self.step_c(tgt, num_c_steps)?;
        self.iteration += 1;
        Ok(IterationLosses { a, b, c })
    }

    fn supervised(&mut self, src: &Batch, tgt: Option<&Batch>) -> Result<StepALosses> {
        let a = self.step_a(src, tgt)?;
        self.iteration += 1;
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationLosses {
    pub a: StepALosses,
    pub b: StepBLosses,
    pub c: Vec<f64>,
}

/// Per-epoch averages; absent terms are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub seg_src: f64,
    pub adv_tgt: Option<f64>,
    pub depth: Option<f64>,
    pub boundary: Option<f64>,
    pub target_entropy: Option<f64>,
}

/// Mean discrepancy change across steps B and C over one epoch's probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochDynamics {
    pub epoch: usize,
    pub probes: usize,
    pub step_b_delta: f64,
    pub step_c_delta: f64,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub logs: Vec<EpochLog>,
    pub dynamics: Vec<EpochDynamics>,
    pub final_model: Model,
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for l in logs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            l.epoch,
            l.seg_src,
            opt_field(l.adv_tgt),
            opt_field(l.depth),
            opt_field(l.boundary),
            opt_field(l.target_entropy)
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_dynamics(path: &Path, rows: &[EpochDynamics]) -> Result<()> {
    let mut s = String::from("epoch,probes,step_b_delta,step_c_delta\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.probes, r.step_b_delta, r.step_c_delta);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn load_split(ds: &Dataset, split: Split, parts: Parts, limit: Option<usize>) -> Result<Vec<Batch>> {
    let entries = ds.entries(split);
    contract!(!entries.is_empty(), "split {} is empty", split.name());
    entries
        .into_iter()
        .take(limit.unwrap_or(usize::MAX))
        .map(|e| Batch::from_loaded(ds.load(e, parts)?))
        .collect()
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Trains on `ds` and writes the run directory.
pub fn train_on(config: &TrainConfig, ds: &Dataset, out_dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    let classes = ds.manifest.classes;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(config)?)
        .map_err(|e| Error::io(&cfg_path, e))?;

    let labelled = config.parts(true);
    let unlabelled = config.parts(false);
    let multitask = config.tasks != TaskSet::SegOnly;
    let (train_set, target_set) = match config.mode {
        TrainMode::Adapt => (
            load_split(ds, Split::SourceTrain, labelled, None)?,
            Some(load_split(ds, Split::TargetTrain, unlabelled, None)?),
        ),
        TrainMode::SourceOnly => {
            contract!(
                !multitask,
                "source-only training cannot use the target depth term of multitask models"
            );
            (load_split(ds, Split::SourceTrain, labelled, None)?, None)
        }
        TrainMode::Oracle => {
            contract!(!multitask, "oracle training supports seg_only models");
            (load_split(ds, Split::TargetTrain, labelled, None)?, None)
        }
    };
    let entropy_set: Vec<Batch> = match (&target_set, config.entropy_samples) {
        (Some(t), n) if n > 0 => t.iter().take(n).cloned().collect(),
        _ => Vec::new(),
    };

    let mut trainer = Trainer::new(config, classes)?;
    let mut order = rng::stream(config.seed, "order");
    let mut logs = Vec::with_capacity(config.epochs);
    let mut dynamics = Vec::new();
    for epoch in 1..=config.epochs {
        let (mut seg, mut adv, mut depth, mut boundary) =
            (Mean::default(), Mean::default(), Mean::default(), Mean::default());
        let (mut b_delta, mut c_delta) = (Mean::default(), Mean::default());
        for it in 0..config.iters_per_epoch {
            let si = order.random_range(0..train_set.len());
            let src = &train_set[si];
            let Some(targets) = &target_set else {
                seg.add(trainer.supervised(src, None)?.seg);
                continue;
            };
            let ti = order.random_range(0..targets.len());
            let tgt = &targets[ti];
            let probe = config.probe_every > 0 && it % config.probe_every == 0;
            let held_out = probe.then(|| &targets[order.random_range(0..targets.len())]);

            let a = trainer.step_a(src, Some(tgt))?;
            seg.add(a.seg);
            if let Some(d) = a.depth {
                depth.add(d);
            }
            if let Some(b) = a.boundary {
                boundary.add(b);
            }
            let d0 = held_out.map(|h| trainer.discrepancy(h)).transpose()?;
            let b = trainer.step_b(src, tgt)?;
            adv.add(b.adv);
            let d1 = held_out.map(|h| trainer.discrepancy(h)).transpose()?;
            trainer.step_c(tgt, config.num_c_steps)?;
            let d2 = held_out.map(|h| trainer.discrepancy(h)).transpose()?;
            if let (Some(d0), Some(d1), Some(d2)) = (d0, d1, d2) {
                b_delta.add(d1 - d0);
                c_delta.add(d2 - d1);
            }
            trainer.iteration += 1;
        }
        let target_entropy = if entropy_set.is_empty() {
            None
        } else {
            Some(trainer.mean_entropy(&entropy_set)?)
        };
        let row = EpochLog {
            epoch,
            seg_src: seg.get().unwrap_or(0.0),
            adv_tgt: adv.get(),
            depth: depth.get(),
            boundary: boundary.get(),
            target_entropy,
        };
        for v in [Some(row.seg_src), row.adv_tgt, row.depth, row.boundary, row.target_entropy]
            .into_iter()
            .flatten()
        {
            if !v.is_finite() {
                return Err(Error::Semantic(format!(
                    "non-finite loss in epoch {epoch}: {row:?}"
                )));
            }
        }
        log::info!("epoch {epoch}: {row:?}");
        logs.push(row);
        if let (Some(b), Some(c)) = (b_delta.get(), c_delta.get()) {
            dynamics.push(EpochDynamics {
                epoch,
                probes: b_delta.n,
                step_b_delta: b,
                step_c_delta: c,
            });
        }
        checkpoint::save(trainer.model(), Some(epoch), &out_dir.join(checkpoint_name(epoch)))?;
        write_log(&out_dir.join(LOG_FILE), &logs)?;
        if !dynamics.is_empty() {
            write_dynamics(&out_dir.join(DYNAMICS_FILE), &dynamics)?;
        }
    }
    Ok(RunSummary {
        run_dir: out_dir.to_path_buf(),
        logs,
        dynamics,
        final_model: trainer.into_model(),
    })
}

pub fn train(config: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<RunSummary> {
    let ds = Dataset::open(data_dir)?;
    train_on(config, &ds, out_dir)
}

/// Reads `log.csv` back.
pub fn read_log(run_dir: &Path) -> Result<Vec<EpochLog>> {
    let path = run_dir.join(LOG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::format(&path, "unexpected log header"));
    }
    let parse_opt = |s: &str| -> std::result::Result<Option<f64>, std::num::ParseFloatError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some)
        }
    };
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |m: String| Error::format(&path, format!("line {}: {m}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| parse_opt(s).map_err(|e| bad(e.to_string()));
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|e| bad(format!("{e}")))?,
                seg_src: num(f[1])?.ok_or_else(|| bad("missing L_seg_src".into()))?,
                adv_tgt: num(f[2])?,
                depth: num(f[3])?,
                boundary: num(f[4])?,
                target_entropy: num(f[5])?,
            })
        })
        .collect()
}

/// Epoch with the lowest target entropy (earliest on ties). Runs without
/// target entropy fall back to the last epoch.
pub fn select_epoch_from(logs: &[EpochLog]) -> Result<usize> {
    contract!(!logs.is_empty(), "training log has no epochs");
    let mut best: Option<(f64, usize)> = None;
    for l in logs {
        if let Some(e) = l.target_entropy {
            if best.is_none_or(|(b, _)| e < b) {
                best = Some((e, l.epoch));
            }
        }
    }
    Ok(best.map_or(logs[logs.len() - 1].epoch, |(_, epoch)| epoch))
}

pub fn select_epoch(run_dir: &Path) -> Result<usize> {
    select_epoch_from(&read_log(run_dir)?)
}
