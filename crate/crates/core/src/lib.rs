//! Multichannel semantic segmentation with classifier-discrepancy domain
//! adaptation.
//!
//! The crate contains a small reverse-mode autodiff engine, the segmentation
//! models and objectives, a procedural paired-domain scene generator, the
//! adversarial trainer, boundary-guided refinement, and evaluation metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod evaluate;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod models;
pub mod netpbm;
pub mod optim;
pub mod refine;
pub mod rng;
pub mod scenegen;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use maps::{BoundaryMap, LabelMap};
pub use models::{build_model, FusionKind, Model, ModelSpec, TaskSet};
pub use scenegen::{Dataset, DatasetConfig, Domain, DomainParams, Split};
pub use tensor::{Element, Tensor};
pub use trainer::{TrainConfig, TrainMode, Trainer};
