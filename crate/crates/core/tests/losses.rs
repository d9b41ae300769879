use mcseg_core::autodiff::{grad_check, Graph, Var};
use mcseg_core::losses::{
    balanced_bce, depth_mse, discrepancy, mean_entropy, multitask_total, softmax_cross_entropy,
    DiscrepancyNorm, LogVariances, TaskLosses,
};
use mcseg_core::{rng, BoundaryMap, LabelMap, Result, TaskSet, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn random(shape: &[usize], seed: u64, tag: &str) -> Tensor<f64> {
    let mut r = rng::stream(seed, tag);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Per-pixel softmax over channels, computed independently of the graph.
fn softmax_oracle(t: &Tensor<f64>) -> Tensor<f64> {
    let (n, k, h, w) = t.dims4().unwrap();
    let hw = h * w;
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for p in 0..hw {
            let idx = |c: usize| (b * k + c) * hw + p;
            let m = (0..k).map(|c| x[idx(c)]).fold(f64::MIN, f64::max);
            let z: f64 = (0..k).map(|c| (x[idx(c)] - m).exp()).sum();
            for c in 0..k {
                out[idx(c)] = (x[idx(c)] - m).exp() / z;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

fn scalar<F>(f: F) -> f64
where
    F: FnOnce(&mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).item()
}

fn labels(seed: u64, n: usize, k: u8, tag: &str) -> Vec<u8> {
    let mut r = rng::stream(seed, tag);
    (0..n).map(|_| r.random_range(0..k)).collect()
}

#[test]
fn cross_entropy_examples() {
    let lm = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
    let mut g = Graph::<f32>::new();
    let logits = g.constant(Tensor::zeros([1, 4, 2, 2]));
    let l = softmax_cross_entropy(&mut g, logits, &lm).unwrap();
    assert!((g.value(l).item() as f64 - 4f64.ln()).abs() < 1e-6);

    let one = LabelMap::new(1, 1, vec![1]).unwrap();
    let mut g = Graph::<f32>::new();
    let logits = g.constant(Tensor::new([1, 3, 1, 1], vec![0.0, 1000.0, 0.0]).unwrap());
    let l = softmax_cross_entropy(&mut g, logits, &one).unwrap();
    assert!(g.value(l).item().abs() < 1e-6);

    let void = LabelMap::new(1, 2, vec![255, 255]).unwrap();
    let mut g = Graph::<f32>::new();
    let logits = g.constant(Tensor::zeros([1, 3, 1, 2]));
    assert!(softmax_cross_entropy(&mut g, logits, &void).is_err());
}

#[test]
fn cross_entropy_matches_scalar_oracle() {
    for seed in 0..5 {
        let x = random(&[1, 3, 1, 2], seed, "logits");
        let y = labels(seed, 2, 3, "labels");
        let p = softmax_oracle(&x);
        let expected = -(p.data()[y[0] as usize * 2].ln() + p.data()[y[1] as usize * 2 + 1].ln()) / 2.0;
        let got = scalar(|g| {
            let v = g.constant(x.clone());
            g.softmax_cross_entropy(v, &y)
        });
        assert!((got - expected).abs() < 1e-12, "seed {seed}: {got} vs {expected}");
    }
}

#[test]
fn discrepancy_examples() {
    let a = Tensor::<f64>::new([1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
    let b = Tensor::<f64>::new([1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
    let d = |x: &Tensor<f64>, y: &Tensor<f64>, norm| {
        scalar(|g| {
            let (p, q) = (g.constant(x.clone()), g.constant(y.clone()));
            discrepancy(g, p, q, norm)
        })
    };
    assert_eq!(d(&a, &b, DiscrepancyNorm::L1), 1.0);
    assert_eq!(d(&a, &a, DiscrepancyNorm::L1), 0.0);
    assert_eq!(d(&a, &b, DiscrepancyNorm::L2), 1.0);

    let bad = Tensor::<f64>::new([1, 2, 1, 1], vec![1.5, -0.5]).unwrap();
    let mut g = Graph::new();
    let (p, q) = (g.constant(bad), g.constant(a));
    if cfg!(debug_assertions) {
        assert!(discrepancy(&mut g, p, q, DiscrepancyNorm::L1).is_err());
    }
}

fn prob(seed: u64, tag: &str) -> Tensor<f64> {
    softmax_oracle(&random(&[1, 4, 2, 3], seed, tag).map(|v| 3.0 * v))
}

proptest! {
    #[test]
    fn discrepancy_is_a_pseudometric(seed in 0u64..10_000) {
        let (a, b, c) = (prob(seed, "a"), prob(seed, "b"), prob(seed, "c"));
        let d = |x: &Tensor<f64>, y: &Tensor<f64>| scalar(|g| {
            let (p, q) = (g.constant(x.clone()), g.constant(y.clone()));
            discrepancy(g, p, q, DiscrepancyNorm::L1)
        });
        let (ab, ba, bc, ac) = (d(&a, &b), d(&b, &a), d(&b, &c), d(&a, &c));
        prop_assert!(ab > 0.0);
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!(ac <= ab + bc + 1e-12);
        let direct: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 24.0;
        prop_assert!((ab - direct).abs() < 1e-12);
    }

    #[test]
    fn sharpening_never_raises_entropy(seed in 0u64..10_000, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let p = prob(seed, "p");
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        // Mix every pixel toward the one-hot vector of its own arg-max.
        let sharpen = |t: f64| {
            let mut d = p.data().to_vec();
            for px in 0..6 {
                let best = (0..4).max_by(|&i, &j| p.data()[i * 6 + px].total_cmp(&p.data()[j * 6 + px])).unwrap();
                for c in 0..4 {
                    let one = if c == best { 1.0 } else { 0.0 };
                    d[c * 6 + px] = (1.0 - t) * d[c * 6 + px] + t * one;
                }
            }
            Tensor::new([1, 4, 2, 3], d).unwrap()
        };
        let (e_lo, e_hi) = (mean_entropy(&sharpen(lo)).unwrap(), mean_entropy(&sharpen(hi)).unwrap());
        prop_assert!(e_hi <= e_lo + 1e-12);
    }
}

#[test]
fn entropy_examples() {
    let mut onehot = vec![0.0f64; 3 * 4];
    for p in 0..4 {
        onehot[(p % 3) * 4 + p] = 1.0;
    }
    assert_eq!(mean_entropy(&Tensor::new([1, 3, 2, 2], onehot).unwrap()).unwrap(), 0.0);
    let uniform = Tensor::<f64>::full([1, 34, 2, 2], 1.0 / 34.0);
    assert!((mean_entropy(&uniform).unwrap() - 34f64.ln()).abs() < 1e-12);
    assert!((34f64.ln() - 3.526).abs() < 1e-3);
}

#[test]
fn depth_mse_examples() {
    let t = random(&[2, 3, 2, 2], 3, "target");
    let p = random(&[2, 3, 2, 2], 3, "pred");
    let mse = |a: &Tensor<f64>, b: &Tensor<f64>| {
        scalar(|g| {
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            depth_mse(g, x, y)
        })
    };
    assert_eq!(mse(&t, &t), 0.0);
    assert!((mse(&t.map(|v| v + 1.0), &t) - 1.0).abs() < 1e-12);
    let mut direct = 0.0;
    for i in 0..24 {
        direct += (p.data()[i] - t.data()[i]).powi(2);
    }
    assert!((mse(&p, &t) - direct / 24.0).abs() < 1e-12);
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn bce(probs: &[f64], gt: &[bool]) -> f64 {
    let (h, w) = (1, gt.len());
    let gt = BoundaryMap::from_mask(h, w, gt);
    let z: Vec<f64> = probs.iter().map(|&p| logit(p)).collect();
    scalar(|g| {
        let v = g.constant(Tensor::new([1, 1, h, w], z).unwrap());
        balanced_bce(g, v, &gt)
    })
}

#[test]
fn balanced_bce_examples() {
    let gt = [true, true, false, false];
    assert!((bce(&[0.5; 4], &gt) - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!(bce(&[1.0 - 1e-12, 1.0 - 1e-12, 1e-12, 1e-12], &gt) < 1e-9);

    // Swapping edge and non-edge sets together with p -> 1 - p.
    let p = [0.9, 0.3, 0.6, 0.2, 0.7];
    let e = [true, false, false, true, true];
    let flipped_p: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
    let flipped_e: Vec<bool> = e.iter().map(|v| !v).collect();
    assert!((bce(&p, &e) - bce(&flipped_p, &flipped_e)).abs() < 1e-12);

    // With balanced sets the loss is the summed plain BCE halved.
    let p: [f64; 4] = [0.8, 0.35, 0.6, 0.1];
    let plain: f64 = p
        .iter()
        .zip(&gt)
        .map(|(&p, &e)| if e { -p.ln() } else { -(1.0 - p).ln() })
        .sum();
    assert!((bce(&p, &gt) - plain / 2.0).abs() < 1e-12);

    // A map without edges keeps only the non-edge term, with zero weight.
    assert_eq!(bce(&[0.3, 0.4], &[false, false]), 0.0);
}

fn log_vars(g: &mut Graph<f64>, s: [f64; 3], triple: bool) -> LogVariances {
    LogVariances {
        seg: g.leaf(Tensor::scalar(s[0]), true),
        depth: g.leaf(Tensor::scalar(s[1]), true),
        boundary: triple.then(|| g.leaf(Tensor::scalar(s[2]), true)),
    }
}

fn total(l: [f64; 4], s: [f64; 3], tasks: TaskSet) -> f64 {
    let triple = tasks == TaskSet::Triple;
    scalar(|g| {
        let c = |g: &mut Graph<f64>, v: f64| g.constant(Tensor::scalar(v));
        let losses = TaskLosses {
            seg_src: c(g, l[0]),
            depth_src: Some(c(g, l[1])),
            depth_tgt: Some(c(g, l[2])),
            boundary_src: triple.then(|| c(g, l[3])),
        };
        let lv = log_vars(g, s, triple);
        multitask_total(g, &losses, &lv, tasks)
    })
}

#[test]
fn multitask_total_examples() {
    let l = [0.8, 0.3, 0.25, 1.7];
    assert!((total(l, [0.0; 3], TaskSet::Dual) - (0.8 / 2.0 + 0.3 / 2.0 + 0.25)).abs() < 1e-12);
    let s: [f64; 3] = [0.4, -0.2, 1.1];
    let direct = |i: usize| (-s[i]).exp() / 2.0 * [l[0], l[1], l[3]][i] + s[i];
    let dual = total(l, s, TaskSet::Dual);
    let triple = total(l, s, TaskSet::Triple);
    assert!((dual - (direct(0) + direct(1) + l[2])).abs() < 1e-12);
    assert!((triple - dual - direct(2)).abs() < 1e-12);
    // The log-variance terms may take the total below zero.
    assert!(total([0.0; 4], [-1.0; 3], TaskSet::Triple) < 0.0);
}

#[test]
fn multitask_total_rejects_missing_losses() {
    let mut g = Graph::<f64>::new();
    let one = g.constant(Tensor::scalar(1.0));
    let lv = log_vars(&mut g, [0.0; 3], true);
    let losses = TaskLosses {
        seg_src: one,
        depth_src: Some(one),
        depth_tgt: Some(one),
        boundary_src: None,
    };
    assert!(multitask_total(&mut g, &losses, &lv, TaskSet::Triple).is_err());
    assert!(multitask_total(&mut g, &losses, &lv, TaskSet::SegOnly).is_err());
    let no_target = TaskLosses { depth_tgt: None, ..losses };
    assert!(multitask_total(&mut g, &no_target, &lv, TaskSet::Dual).is_err());
}

#[test]
fn log_variance_gradient_matches_closed_form() {
    let (l, s): ([f64; 4], [f64; 3]) = ([0.8, 0.3, 0.25, 1.7], [0.4, -0.2, 1.1]);
    let mut g = Graph::<f64>::new();
    let c = |g: &mut Graph<f64>, v: f64| g.constant(Tensor::scalar(v));
    let losses = TaskLosses {
        seg_src: c(&mut g, l[0]),
        depth_src: Some(c(&mut g, l[1])),
        depth_tgt: Some(c(&mut g, l[2])),
        boundary_src: Some(c(&mut g, l[3])),
    };
    let lv = log_vars(&mut g, s, true);
    let out = multitask_total(&mut g, &losses, &lv, TaskSet::Triple).unwrap();
    g.backward(out).unwrap();
    for (var, (si, li)) in [lv.seg, lv.depth, lv.boundary.unwrap()]
        .into_iter()
        .zip(s.iter().zip([l[0], l[1], l[3]]))
    {
        let expected = -(-si).exp() / 2.0 * li + 1.0;
        assert!((g.grad(var).unwrap().item() - expected).abs() < 1e-12);
    }
}

/// Gradient descent on one log-variance with its loss held at `c`; returns σ².
pub fn descend_variance(c: f64) -> f64 {
    let mut s = 0.0f64;
    for _ in 0..20_000 {
        let mut g = Graph::<f64>::new();
        let k = |g: &mut Graph<f64>, v: f64| g.constant(Tensor::scalar(v));
        let losses = TaskLosses {
            seg_src: k(&mut g, c),
            depth_src: Some(k(&mut g, c)),
            depth_tgt: Some(k(&mut g, 0.0)),
            boundary_src: None,
        };
        let lv = LogVariances {
            seg: g.leaf(Tensor::scalar(s), true),
            depth: g.constant(Tensor::scalar(0.0)),
            boundary: None,
        };
        let out = multitask_total(&mut g, &losses, &lv, TaskSet::Dual).unwrap();
        g.backward(out).unwrap();
        s -= 0.05 * g.grad(lv.seg).unwrap().item();
    }
    s.exp()
}

#[test]
fn uncertainty_fixed_point_is_half_the_loss() {
    for c in [0.5, 1.0, 4.0] {
        let var = descend_variance(c);
        assert!((var - c / 2.0).abs() < 1e-3, "c = {c}: σ² = {var}");
    }
}

#[test]
fn grad_check_every_loss() {
    for seed in 0..5 {
        let y = labels(seed, 2 * 9, 3, "y");
        let err = grad_check(
            |g, v| {
                let a = g.softmax_cross_entropy(v[0], &y)?;
                let b = g.softmax_cross_entropy(v[1], &y)?;
                g.add(a, b)
            },
            &[random(&[2, 3, 3, 3], seed, "c1"), random(&[2, 3, 3, 3], seed, "c2")],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "segmentation seed {seed}: {err}");

        let err = grad_check(
            |g, v| depth_mse(g, v[0], v[1]),
            &[random(&[1, 3, 2, 2], seed, "p"), random(&[1, 3, 2, 2], seed, "t")],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "depth seed {seed}: {err}");

        let edges: Vec<bool> = labels(seed, 12, 2, "edges").iter().map(|&v| v == 1).collect();
        let gt = BoundaryMap::from_mask(3, 4, &edges);
        let err = grad_check(
            |g, v| balanced_bce(g, v[0], &gt),
            &[random(&[1, 1, 3, 4], seed, "z")],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "boundary seed {seed}: {err}");

        for norm in [DiscrepancyNorm::L1, DiscrepancyNorm::L2] {
            let err = grad_check(
                |g, v| {
                    let p = g.softmax_channel(v[0])?;
                    let q = g.softmax_channel(v[1])?;
                    discrepancy(g, p, q, norm)
                },
                &[random(&[1, 3, 2, 2], seed, "d1"), random(&[1, 3, 2, 2], seed, "d2")],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "discrepancy {norm:?} seed {seed}: {err}");
        }

        for tasks in [TaskSet::Dual, TaskSet::Triple] {
            let err = grad_check(
                |g, v| {
                    let sq: Vec<Var> = v[..4].iter().map(|&x| g.square(x)).collect::<Result<_>>()?;
                    let losses = TaskLosses {
                        seg_src: sq[0],
                        depth_src: Some(sq[1]),
                        depth_tgt: Some(sq[2]),
                        boundary_src: (tasks == TaskSet::Triple).then_some(sq[3]),
                    };
                    let lv = LogVariances {
                        seg: v[4],
                        depth: v[5],
                        boundary: (tasks == TaskSet::Triple).then_some(v[6]),
                    };
                    let total = multitask_total(g, &losses, &lv, tasks)?;
                    // Keep the last loss reachable for the dual task set.
                    let tail = g.scale(sq[3], 0.1)?;
                    g.add(total, tail)
                },
                &(0..7)
                    .map(|i| random(&[], seed, &format!("m{i}")))
                    .collect::<Vec<_>>(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "multitask {tasks:?} seed {seed}: {err}");
        }
    }
}
