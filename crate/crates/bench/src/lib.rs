//! Fixtures shared by the benchmarks.

use mcseg_core::scenegen::{generate_scene, Sample};
use mcseg_core::trainer::Batch;
use mcseg_core::{rng, Domain, DomainParams, Graph, Tensor, TrainConfig, Trainer, Var};

pub const CLASSES: usize = 6;

/// One rendered scene of the given domain.
pub fn scene(domain: Domain, size: (usize, usize), seed: u64) -> Sample {
    let params = match domain {
        Domain::Source => DomainParams::source(CLASSES),
        Domain::Target => DomainParams::target(CLASSES),
    };
    generate_scene(&mut rng::stream(seed, "bench"), &params, domain, size, CLASSES)
        .expect("valid scene parameters")
}

pub fn batch(sample: &Sample, labelled: bool) -> Batch {
    let mut b = Batch::new(sample.rgb.clone(), Some(sample.hha.clone())).expect("image batch");
    if labelled {
        b.labels = Some(sample.labels.clone());
        b.boundaries = Some(sample.boundaries.clone());
    }
    b
}

pub fn trainer(config: &TrainConfig) -> Trainer {
    Trainer::new(config, CLASSES).expect("valid training config")
}

fn ramp(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i * 7919) % 97) as f32 / 97.0 - 0.5).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// A graph holding one 3×3 convolution over an `n×c×h×w` input, with the
/// input, weight and bias leaves.
pub fn conv_graph(c_in: usize, c_out: usize, h: usize, w: usize) -> (Graph<f32>, Var, Var, Var) {
    let mut g = Graph::new();
    let x = g.leaf(ramp(&[1, c_in, h, w]), true);
    let wt = g.leaf(ramp(&[c_out, c_in, 3, 3]), true);
    let b = g.leaf(ramp(&[c_out]), true);
    (g, x, wt, b)
}
