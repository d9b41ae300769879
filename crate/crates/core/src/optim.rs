//! Named parameters and the momentum SGD optimizer.

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Kaiming-uniform conv weight `[c_out, c_in, k, k]` and a zero bias.
    pub fn add_conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut Rng,
    ) -> (ParamId, ParamId) {
        let fan_in = (c_in * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let data = (0..c_out * c_in * k * k)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let w = Tensor::new([c_out, c_in, k, k], data).expect("shape matches data");
        (
            self.add(format!("{name}.weight"), w),
            self.add(format!("{name}.bias"), Tensor::zeros([c_out])),
        )
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over the raw bytes of the given parameters, in order.
    pub fn digest(&self, ids: &[ParamId]) -> [u8; 32] {
        let mut h = Sha256::new();
        for &id in ids {
            for v in self.params[id.0].value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Records which parameters a forward pass placed on a graph.
///
/// Only parameters marked trainable become gradient-tracking leaves; the rest
/// enter the graph as constants, which prunes their part of the backward pass.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Vec<bool>,
    bound: Vec<(ParamId, Var)>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: &[ParamId]) -> Self {
        let mut mask = vec![false; store.len()];
        for id in trainable {
            mask[id.0] = true;
        }
        Self {
            store,
            trainable: mask,
            bound: Vec::new(),
        }
    }

    /// Binder with nothing trainable, for inference.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn bind(&mut self, graph: &mut Graph, id: ParamId) -> Var {
        let v = graph.leaf(self.store.get(id).value.clone(), self.trainable[id.0]);
        self.bound.push((id, v));
        v
    }

    /// Gradients accumulated on `graph` for each trainable parameter, summed
    /// when one parameter was bound more than once.
    pub fn gradients(&self, graph: &Graph) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.store.len()];
        for &(id, var) in &self.bound {
            let Some(g) = graph.grad(var) else { continue };
            match grads[id.0].as_mut() {
                Some(acc) => acc.add_assign(g).expect("same parameter shape"),
                None => grads[id.0] = Some(g.clone()),
            }
        }
        Gradients(grads)
    }
}

#[derive(Clone, Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Classic (heavy-ball) momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Option<Tensor>>,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32) -> Result<Self> {
        contract!(lr > 0.0, "learning rate must be positive, got {}", lr);
        contract!(
            (0.0..1.0).contains(&momentum),
            "momentum must lie in [0, 1), got {}",
            momentum
        );
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(id.0).and_then(|v| v.as_ref())
    }

    /// Updates every parameter in `ids`. A parameter without a gradient is
    /// treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, ids: &[ParamId]) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for &id in ids {
            let p = store.value_mut(id);
            let v = self.velocity[id.0].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(id);
            for (i, (vi, pi)) in v.data_mut().iter_mut().zip(p.data_mut()).enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(value));
        (store, id)
    }

    fn const_grad(id: ParamId, n: usize, g: f32) -> Gradients {
        let mut v = vec![None; n];
        v[id.0] = Some(Tensor::scalar(g));
        Gradients(v)
    }

    #[test]
    fn plain_sgd_step() {
        let (mut store, id) = single(0.0);
        let mut opt = SgdMomentum::new(0.1, 0.0).unwrap();
        opt.step(&mut store, &const_grad(id, 1, 1.0), &[id]);
        assert!((store.get(id).value.item() + 0.1).abs() < 1e-7);
    }

    #[test]
    fn momentum_velocity_after_two_steps() {
        let (mut store, id) = single(0.0);
        let mut opt = SgdMomentum::new(1.0, 0.9).unwrap();
        let g = const_grad(id, 1, 1.0);
        opt.step(&mut store, &g, &[id]);
        opt.step(&mut store, &g, &[id]);
        assert!((opt.velocity(id).unwrap().item() - 1.9).abs() < 1e-6);
        assert!((store.get(id).value.item() + 2.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameter_alone() {
        let (mut store, id) = single(3.0);
        let mut opt = SgdMomentum::new(0.5, 0.9).unwrap();
        opt.step(&mut store, &const_grad(id, 1, 0.0), &[id]);
        assert_eq!(store.get(id).value.item(), 3.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(SgdMomentum::new(0.0, 0.5).is_err());
        assert!(SgdMomentum::new(0.1, 1.0).is_err());
    }

    #[test]
    fn binder_only_tracks_trainable() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let b = store.add("b", Tensor::from_f64([2], &[3.0, 4.0]).unwrap());
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[a]);
        let va = binder.bind(&mut g, a);
        let vb = binder.bind(&mut g, b);
        let prod = g.mul(va, vb).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        let grads = binder.gradients(&g);
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(b).is_none());
    }
}
