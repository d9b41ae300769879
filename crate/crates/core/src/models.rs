//! Feature generator and classifier heads for every fusion family and the
//! multitask variants.
//!
//! The generator is a three-stage strided conv encoder whose output sits at
//! 1/8 of the input resolution. Each classifier upsamples ×8 bilinearly and
//! applies three convolutions. Score-fusion models carry one classifier pair
//! per modality and fuse the two score maps of each classifier index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::losses::UncertaintyParams;
use crate::optim::{Binder, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    RgbOnly,
    HhaOnly,
    Early,
    LateAdd,
    LateConcat,
    ScoreAdd,
    ScoreConcatConv,
    ScoreGate,
    Fusenet,
}

impl FusionKind {
    pub const ALL: [FusionKind; 9] = [
        FusionKind::RgbOnly,
        FusionKind::HhaOnly,
        FusionKind::Early,
        FusionKind::LateAdd,
        FusionKind::LateConcat,
        FusionKind::ScoreAdd,
        FusionKind::ScoreConcatConv,
        FusionKind::ScoreGate,
        FusionKind::Fusenet,
    ];

    pub fn uses_rgb(self) -> bool {
        self != FusionKind::HhaOnly
    }

    pub fn uses_hha(self) -> bool {
        self != FusionKind::RgbOnly
    }

    pub fn is_score(self) -> bool {
        matches!(
            self,
            FusionKind::ScoreAdd | FusionKind::ScoreConcatConv | FusionKind::ScoreGate
        )
    }

    fn two_encoders(self) -> bool {
        matches!(
            self,
            FusionKind::LateAdd
                | FusionKind::LateConcat
                | FusionKind::ScoreAdd
                | FusionKind::ScoreConcatConv
                | FusionKind::ScoreGate
                | FusionKind::Fusenet
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::RgbOnly => "rgb_only",
            FusionKind::HhaOnly => "hha_only",
            FusionKind::Early => "early",
            FusionKind::LateAdd => "late_add",
            FusionKind::LateConcat => "late_concat",
            FusionKind::ScoreAdd => "score_add",
            FusionKind::ScoreConcatConv => "score_concat_conv",
            FusionKind::ScoreGate => "score_gate",
            FusionKind::Fusenet => "fusenet",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSet {
    #[default]
    SegOnly,
    /// Segmentation and HHA regression.
    Dual,
    /// Segmentation, HHA regression and boundary detection.
    Triple,
}

impl TaskSet {
    pub fn has_depth(self) -> bool {
        self != TaskSet::SegOnly
    }

    pub fn has_boundary(self) -> bool {
        self == TaskSet::Triple
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskSet::SegOnly => "seg_only",
            TaskSet::Dual => "dual",
            TaskSet::Triple => "triple",
        }
    }
}

impl FromStr for TaskSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg_only" => Ok(TaskSet::SegOnly),
            "dual" => Ok(TaskSet::Dual),
            "triple" => Ok(TaskSet::Triple),
            _ => Err(Error::Config(format!("unknown task set {s:?}"))),
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub fusion: FusionKind,
    pub tasks: TaskSet,
    pub classes: usize,
    pub width: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks != TaskSet::SegOnly && self.fusion != FusionKind::RgbOnly {
            return Err(Error::Config(format!(
                "multitask models take RGB input only; {} cannot be combined with {}",
                self.fusion,
                self.tasks.name()
            )));
        }
        if self.classes < 2 || self.classes > 254 {
            return Err(Error::Config(format!(
                "class count {} outside 2..=254",
                self.classes
            )));
        }
        if self.width == 0 {
            return Err(Error::Config("model width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let (weight, bias) = store.add_conv(name, c_in, c_out, k, rng);
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    fn apply(&self, g: &mut Graph, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        let w = b.bind(g, self.weight);
        let bias = b.bind(g, self.bias);
        g.conv2d(x, w, bias, self.stride, self.pad)
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Three stages of `[conv3×3 stride 2, relu, conv3×3, relu]` with widths
/// `(w, 2w, 4w)`.
#[derive(Clone, Debug)]
struct Encoder {
    stages: [[Conv; 2]; 3],
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, width: usize, rng: &mut Rng) -> Self {
        let widths = [width, 2 * width, 4 * width];
        let mut prev = c_in;
        let stages = std::array::from_fn(|s| {
            let c = widths[s];
            let down = Conv::new(store, &format!("{name}.s{}.down", s + 1), prev, c, 3, 2, rng);
            let conv = Conv::new(store, &format!("{name}.s{}.conv", s + 1), c, c, 3, 1, rng);
            prev = c;
            [down, conv]
        });
        Self { stages }
    }

    fn stage(&self, i: usize, g: &mut Graph, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        let [down, conv] = &self.stages[i];
        let y = down.apply(g, b, x)?;
        let y = g.relu(y)?;
        let y = conv.apply(g, b, y)?;
        g.relu(y)
    }

    fn ids(&self) -> Vec<ParamId> {
        self.stages.iter().flatten().flat_map(Conv::ids).collect()
    }
}

/// Bilinear ×8 upsample followed by `conv1×1, relu, conv3×3, relu, conv1×1`.
#[derive(Clone, Debug)]
struct Head {
    convs: [Conv; 3],
}

impl Head {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        width: usize,
        c_out: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            convs: [
                Conv::new(store, &format!("{name}.conv1"), c_in, width, 1, 1, rng),
                Conv::new(store, &format!("{name}.conv2"), width, width, 3, 1, rng),
                Conv::new(store, &format!("{name}.conv3"), width, c_out, 1, 1, rng),
            ],
        }
    }

    fn apply(&self, g: &mut Graph, b: &mut Binder<'_>, features: Var) -> Result<Var> {
        let up = g.upsample(features, 8)?;
        let y = self.convs[0].apply(g, b, up)?;
        let y = g.relu(y)?;
        let y = self.convs[1].apply(g, b, y)?;
        let y = g.relu(y)?;
        self.convs[2].apply(g, b, y)
    }

    fn ids(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(Conv::ids).collect()
    }
}

/// One 1×1 conv per encoder stage producing an edge logit map.
#[derive(Clone, Debug)]
struct BoundaryHead {
    taps: [Conv; 3],
}

impl BoundaryHead {
    fn ids(&self) -> Vec<ParamId> {
        self.taps.iter().flat_map(Conv::ids).collect()
    }
}

/// Disjoint partition of a model's parameters by training role.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamGroups {
    pub generator: Vec<ParamId>,
    pub classifier: Vec<ParamId>,
    /// Depth and boundary heads.
    pub heads: Vec<ParamId>,
    pub uncertainty: Vec<ParamId>,
}

impl ParamGroups {
    pub fn all(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = [
            &self.generator,
            &self.classifier,
            &self.heads,
            &self.uncertainty,
        ]
        .into_iter()
        .flatten()
        .copied()
        .collect();
        ids.sort();
        ids
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    /// Encoder for the primary input (RGB, HHA, or both stacked).
    encoder: Encoder,
    /// Second encoder for HHA in late, score and fusenet models.
    hha_encoder: Option<Encoder>,
    /// Per classifier index: one head, or `[rgb, hha]` heads for score fusion.
    classifiers: [Vec<Head>; 2],
    /// Learned score fusion (concat-conv or gate), shared by both indices.
    score_conv: Option<Conv>,
    depth_head: Option<Head>,
    boundary_head: Option<BoundaryHead>,
    uncertainty: Option<UncertaintyParams>,
    groups: ParamGroups,
    /// Number of classifier heads, counted across both indices.
    head_count: usize,
}

/// Forward outputs; everything except the logits depends on the task set.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub logits: [Var; 2],
    pub depth: Option<Var>,
    /// Full-resolution edge logits of each side tap.
    pub boundary_logits: Vec<Var>,
    /// Mean of the side-tap sigmoids.
    pub boundary: Option<Var>,
}

pub fn build_model(spec: ModelSpec, rng: &mut Rng) -> Result<Model> {
    spec.validate()?;
    let ModelSpec {
        fusion,
        tasks,
        classes,
        width,
    } = spec;
    let mut store = ParamStore::new();
    let mut groups = ParamGroups::default();

    let primary_in = match fusion {
        FusionKind::Early => 6,
        _ => 3,
    };
    let primary_name = match fusion {
        FusionKind::HhaOnly => "hha_enc",
        FusionKind::Early => "rgbd_enc",
        _ => "rgb_enc",
    };
    let encoder = Encoder::new(&mut store, primary_name, primary_in, width, rng);
    groups.generator.extend(encoder.ids());
    let hha_encoder = fusion.two_encoders().then(|| {
        let e = Encoder::new(&mut store, "hha_enc", 3, width, rng);
        groups.generator.extend(e.ids());
        e
    });

    let feat = match fusion {
        FusionKind::LateConcat => 8 * width,
        _ => 4 * width,
    };
    let mut head_count = 0;
    let classifiers: [Vec<Head>; 2] = std::array::from_fn(|i| {
        let names: &[&str] = if fusion.is_score() {
            &["rgb", "hha"]
        } else {
            &[""]
        };
        names
            .iter()
            .map(|m| {
                let name = if m.is_empty() {
                    format!("c{}", i + 1)
                } else {
                    format!("c{}.{m}", i + 1)
                };
                let h = Head::new(&mut store, &name, feat, width, classes, rng);
                groups.classifier.extend(h.ids());
                head_count += 1;
                h
            })
            .collect()
    });
    let score_conv = matches!(fusion, FusionKind::ScoreConcatConv | FusionKind::ScoreGate).then(|| {
        let name = if fusion == FusionKind::ScoreGate {
            "score.gate"
        } else {
            "score.fuse"
        };
        let c = Conv::new(&mut store, name, 2 * classes, classes, 1, 1, rng);
        groups.classifier.extend(c.ids());
        c
    });

    let depth_head = tasks.has_depth().then(|| {
        let h = Head::new(&mut store, "depth", feat, width, 3, rng);
        groups.heads.extend(h.ids());
        h
    });
    let boundary_head = tasks.has_boundary().then(|| {
        let taps = std::array::from_fn(|s| {
            let c_in = width << s;
            Conv::new(&mut store, &format!("boundary.tap{}", s + 1), c_in, 1, 1, 1, rng)
        });
        let h = BoundaryHead { taps };
        groups.heads.extend(h.ids());
        h
    });
    let uncertainty = UncertaintyParams::register(&mut store, tasks);
    if let Some(u) = &uncertainty {
        groups.uncertainty.extend(u.ids());
    }

    Ok(Model {
        spec,
        store,
        encoder,
        hha_encoder,
        classifiers,
        score_conv,
        depth_head,
        boundary_head,
        uncertainty,
        groups,
        head_count,
    })
}

impl Model {
    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_groups(&self) -> &ParamGroups {
        &self.groups
    }

    pub fn uncertainty(&self) -> Option<&UncertaintyParams> {
        self.uncertainty.as_ref()
    }

    pub fn classifier_head_count(&self) -> usize {
        self.head_count
    }

    /// Runs the network on one batch. `aux` controls whether depth and
    /// boundary heads are evaluated (they never feed the logits).
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        rgb: &Tensor,
        hha: Option<&Tensor>,
        aux: bool,
    ) -> Result<Outputs> {
        let fusion = self.spec.fusion;
        let hha = match (fusion.uses_hha(), hha) {
            (true, Some(h)) => Some(h),
            (true, None) => {
                return Err(Error::Contract(format!(
                    "{fusion} model needs an HHA input"
                )))
            }
            (false, _) => None,
        };
        let (n, c, h, w) = rgb.dims4()?;
        contract!(c == 3, "RGB input must have 3 channels, got {}", c);
        contract!(
            h % 8 == 0 && w % 8 == 0 && h > 0 && w > 0,
            "input size {}x{} must be a positive multiple of 8",
            h,
            w
        );
        if let Some(t) = hha {
            contract!(
                t.shape() == [n, 3, h, w],
                "HHA shape {:?} does not match RGB {:?}",
                t.shape(),
                rgb.shape()
            );
        }

        let rgb_v = g.constant(rgb.clone());
        let hha_v = hha.map(|t| g.constant(t.clone()));
        let primary = match fusion {
            FusionKind::HhaOnly => hha_v.expect("checked above"),
            FusionKind::Early => g.concat_channels(rgb_v, hha_v.expect("checked above"))?,
            _ => rgb_v,
        };

        let mut taps = Vec::with_capacity(3);
        let mut x = primary;
        let mut hx = hha_v;
        for s in 0..3 {
            x = self.encoder.stage(s, g, b, x)?;
            if fusion == FusionKind::Fusenet {
                let enc = self.hha_encoder.as_ref().expect("fusenet has an HHA encoder");
                let y = enc.stage(s, g, b, hx.expect("fusenet has HHA input"))?;
                hx = Some(y);
                x = g.add(x, y)?;
            }
            taps.push(x);
        }
        let features = x;

        let logits: [Var; 2] = match fusion {
            FusionKind::ScoreAdd | FusionKind::ScoreConcatConv | FusionKind::ScoreGate => {
                let enc = self.hha_encoder.as_ref().expect("score fusion has an HHA encoder");
                let mut hf = hha_v.expect("score fusion has HHA input");
                for s in 0..3 {
                    hf = enc.stage(s, g, b, hf)?;
                }
                let mut out = [features; 2];
                for (i, heads) in self.classifiers.iter().enumerate() {
                    let s_rgb = heads[0].apply(g, b, features)?;
                    let s_hha = heads[1].apply(g, b, hf)?;
                    out[i] = self.fuse_scores(g, b, s_rgb, s_hha)?;
                }
                out
            }
            FusionKind::LateAdd | FusionKind::LateConcat => {
                let enc = self.hha_encoder.as_ref().expect("late fusion has an HHA encoder");
                let mut hf = hha_v.expect("late fusion has HHA input");
                for s in 0..3 {
                    hf = enc.stage(s, g, b, hf)?;
                }
                let fused = if fusion == FusionKind::LateAdd {
                    g.add(features, hf)?
                } else {
                    g.concat_channels(features, hf)?
                };
                [
                    self.classifiers[0][0].apply(g, b, fused)?,
                    self.classifiers[1][0].apply(g, b, fused)?,
                ]
            }
            _ => [
                self.classifiers[0][0].apply(g, b, features)?,
                self.classifiers[1][0].apply(g, b, features)?,
            ],
        };

        let mut out = Outputs {
            logits,
            depth: None,
            boundary_logits: Vec::new(),
            boundary: None,
        };
        if !aux {
            return Ok(out);
        }
        if let Some(head) = &self.depth_head {
            out.depth = Some(head.apply(g, b, features)?);
        }
        if let Some(head) = &self.boundary_head {
            let mut mean = None;
            for (s, (tap, conv)) in taps.iter().zip(&head.taps).enumerate() {
                let z = conv.apply(g, b, *tap)?;
                let z = g.upsample(z, 2 << s)?;
                out.boundary_logits.push(z);
                let p = g.sigmoid(z)?;
                mean = Some(match mean {
                    None => p,
                    Some(m) => g.add(m, p)?,
                });
            }
            let total = mean.expect("three taps");
            out.boundary = Some(g.scale(total, 1.0 / 3.0)?);
        }
        Ok(out)
    }

    fn fuse_scores(&self, g: &mut Graph, b: &mut Binder<'_>, s_rgb: Var, s_hha: Var) -> Result<Var> {
        match self.spec.fusion {
            FusionKind::ScoreAdd => g.add(s_rgb, s_hha),
            FusionKind::ScoreConcatConv => {
                let cat = g.concat_channels(s_rgb, s_hha)?;
                self.score_conv.expect("concat-conv fusion").apply(g, b, cat)
            }
            FusionKind::ScoreGate => {
                let cat = g.concat_channels(s_rgb, s_hha)?;
                let z = self.score_conv.expect("gate fusion").apply(g, b, cat)?;
                let gate = g.sigmoid(z)?;
                let inv = g.affine(gate, -1.0, 1.0)?;
                let a = g.mul(gate, s_rgb)?;
                let c = g.mul(inv, s_hha)?;
                g.add(a, c)
            }
            other => unreachable!("{other} is not a score fusion"),
        }
    }
}

/// Inference result for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub probs: [Tensor; 2],
    /// Arg-max of `p1 + p2` per pixel.
    pub labels: Vec<u8>,
    pub depth: Option<Tensor>,
    pub boundary: Option<Tensor>,
}

impl Model {
    pub fn predict(&self, rgb: &Tensor, hha: Option<&Tensor>) -> Result<Prediction> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.store);
        let out = self.forward(&mut g, &mut b, rgb, hha, true)?;
        let p1 = g.softmax_channel(out.logits[0])?;
        let p2 = g.softmax_channel(out.logits[1])?;
        let (p1, p2) = (g.value(p1).clone(), g.value(p2).clone());
        let labels = argmax_sum(&p1, &p2)?;
        Ok(Prediction {
            labels,
            probs: [p1, p2],
            depth: out.depth.map(|v| g.value(v).clone()),
            boundary: out.boundary.map(|v| g.value(v).clone()),
        })
    }
}

/// Per-pixel arg-max of `a + b` over the channel axis; ties go to the lower
/// class id.
pub fn argmax_sum(a: &Tensor, b: &Tensor) -> Result<Vec<u8>> {
    let (n, k, h, w) = a.dims4()?;
    contract!(a.shape() == b.shape(), "argmax_sum: shapes differ");
    let hw = h * w;
    let (da, db) = (a.data(), b.data());
    let mut labels = Vec::with_capacity(n * hw);
    for bi in 0..n {
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = f32::NEG_INFINITY;
            for c in 0..k {
                let i = (bi * k + c) * hw + p;
                let v = da[i] + db[i];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            labels.push(best as u8);
        }
    }
    Ok(labels)
}
