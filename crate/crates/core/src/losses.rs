//! Training objectives.
//!
//! All differentiable losses are built on a [`Graph`] and return a scalar
//! [`Var`]. [`mean_entropy`] is a plain evaluation statistic.

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::maps::{BoundaryMap, LabelMap};
use crate::models::TaskSet;
use crate::optim::{Binder, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Mean negative log-likelihood of the labelled class, ignoring void pixels.
pub fn softmax_cross_entropy(g: &mut Graph, logits: Var, labels: &LabelMap) -> Result<Var> {
    let (_, _, h, w) = g.value(logits).dims4()?;
    contract!(
        (h, w) == (labels.height, labels.width),
        "cross-entropy: logits are {}x{} but labels are {}x{}",
        h,
        w,
        labels.height,
        labels.width
    );
    g.softmax_cross_entropy(logits, &labels.values)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscrepancyNorm {
    #[default]
    L1,
    L2,
}

/// Mean elementwise distance between two classifiers' probability maps.
pub fn discrepancy<T: Element>(
    g: &mut Graph<T>,
    p1: Var,
    p2: Var,
    norm: DiscrepancyNorm,
) -> Result<Var> {
    if cfg!(debug_assertions) {
        for v in [p1, p2] {
            contract!(
                g.value(v)
                    .data()
                    .iter()
                    .all(|&x| x >= T::zero() && x <= T::one()),
                "discrepancy expects probabilities in [0, 1]"
            );
        }
    }
    let diff = g.sub(p1, p2)?;
    let dist = match norm {
        DiscrepancyNorm::L1 => g.abs(diff)?,
        DiscrepancyNorm::L2 => g.square(diff)?,
    };
    g.mean(dist)
}

/// Mean squared error over every element.
pub fn depth_mse<T: Element>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff)?;
    g.mean(sq)
}

/// Class-balanced boundary cross-entropy evaluated on logits.
pub fn balanced_bce<T: Element>(g: &mut Graph<T>, logits: Var, gt: &BoundaryMap) -> Result<Var> {
    let shape = g.value(logits).shape();
    let spatial: usize = shape.iter().skip(2).product();
    contract!(
        shape.len() == 4 && shape[1] == 1 && spatial == gt.height * gt.width,
        "balanced_bce: logits {:?} do not match a {}x{} boundary map",
        shape,
        gt.height,
        gt.width
    );
    g.balanced_bce(logits, &gt.edges())
}

/// Per-task log-variances `s_i = log σ_i²` stored as trainable scalars.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UncertaintyParams {
    pub seg: ParamId,
    pub depth: ParamId,
    pub boundary: Option<ParamId>,
}

impl UncertaintyParams {
    /// Registers the log-variances needed by `tasks`, initialised to 0 (σ² = 1).
    pub fn register(store: &mut ParamStore, tasks: TaskSet) -> Option<Self> {
        if tasks == TaskSet::SegOnly {
            return None;
        }
        let mut add = |name: &str| store.add(format!("uncertainty.{name}"), Tensor::scalar(0.0));
        let seg = add("seg");
        let depth = add("depth");
        let boundary = (tasks == TaskSet::Triple).then(|| add("boundary"));
        Some(Self {
            seg,
            depth,
            boundary,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.seg, self.depth];
        ids.extend(self.boundary);
        ids
    }

    pub fn bind(&self, binder: &mut Binder<'_>, g: &mut Graph) -> LogVariances {
        LogVariances {
            seg: binder.bind(g, self.seg),
            depth: binder.bind(g, self.depth),
            boundary: self.boundary.map(|b| binder.bind(g, b)),
        }
    }
}

/// Graph handles of the log-variances for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LogVariances {
    pub seg: Var,
    pub depth: Var,
    pub boundary: Option<Var>,
}

/// Per-task scalar losses feeding [`multitask_total`].
#[derive(Clone, Copy, Debug)]
pub struct TaskLosses {
    pub seg_src: Var,
    pub depth_src: Option<Var>,
    pub depth_tgt: Option<Var>,
    pub boundary_src: Option<Var>,
}

/// Uncertainty-weighted total: `Σ_i (exp(-s_i)/2 · L_i + s_i) + L_depth_tgt`.
///
/// The target-domain depth term is added unweighted.
pub fn multitask_total<T: Element>(
    g: &mut Graph<T>,
    losses: &TaskLosses,
    s: &LogVariances,
    tasks: TaskSet,
) -> Result<Var> {
    let missing = |what: &str| Error::Contract(format!("multitask_total: missing {what}"));
    let mut terms = vec![(losses.seg_src, s.seg)];
    match tasks {
        TaskSet::SegOnly => {
            return Err(Error::Contract(
                "multitask_total needs the dual or triple task set".into(),
            ))
        }
        TaskSet::Dual | TaskSet::Triple => {
            terms.push((losses.depth_src.ok_or_else(|| missing("source depth loss"))?, s.depth));
        }
    }
    if tasks == TaskSet::Triple {
        let l3 = losses
            .boundary_src
            .ok_or_else(|| missing("boundary loss"))?;
        let s3 = s.boundary.ok_or_else(|| missing("boundary log-variance"))?;
        terms.push((l3, s3));
    } else {
        contract!(
            losses.boundary_src.is_none(),
            "multitask_total: boundary loss given for the dual task set"
        );
    }
    let mut total = losses.depth_tgt.ok_or_else(|| missing("target depth loss"))?;
    for (loss, log_var) in terms {
        let neg = g.scale(log_var, -1.0)?;
        let precision = g.exp(neg)?;
        let weighted = g.mul(precision, loss)?;
        let half = g.scale(weighted, 0.5)?;
        let term = g.add(half, log_var)?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Mean over pixels of the per-pixel Shannon entropy (nats) of an `N×K×H×W`
/// probability tensor.
pub fn mean_entropy<T: Element>(probs: &Tensor<T>) -> Result<f64> {
    let (n, k, h, w) = probs.dims4()?;
    let hw = h * w;
    contract!(n * hw > 0, "mean_entropy of an empty tensor");
    let d = probs.data();
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..hw {
            for c in 0..k {
                let q = d[(b * k + c) * hw + p].as_f64();
                if q > 0.0 {
                    total -= q * q.ln();
                }
            }
        }
    }
    Ok(total / (n * hw) as f64)
}
