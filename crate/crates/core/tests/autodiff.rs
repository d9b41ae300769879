use mcseg_core::autodiff::{grad_check, Activation, Combine, Graph, Var};
use mcseg_core::rng;
use mcseg_core::{Result, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn random(shape: &[usize], seed: u64, tag: &str) -> Tensor<f64> {
    let mut r = rng::stream(seed, tag);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct cross-correlation with zero padding.
fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, ci, h, wd] = x.shape() else { panic!() };
    let [co, _, kh, kw] = w.shape() else { panic!() };
    let (n, ci, h, wd, co, kh, kw) = (*n, *ci, *h, *wd, *co, *kh, *kw);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for bi in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((bi * ci + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * ci + c) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new([n, co, ho, wo], out).unwrap()
}

fn conv(x: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (x, w, b) = (g.constant(x), g.constant(w), g.constant(b));
    let y = g.conv2d(x, w, b, stride, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_identity_scaling_kernel() {
    let y = conv(
        Tensor::ones([1, 1, 3, 3]),
        Tensor::full([1, 1, 1, 1], 2.0),
        Tensor::zeros([1]),
        1,
        0,
    );
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_box_kernel_center() {
    let x = Tensor::from_f64([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
    let w = Tensor::ones([1, 1, 3, 3]);
    let y = conv(x.clone(), w.clone(), Tensor::zeros([1]), 1, 1);
    let oracle = naive_conv(&x, &w, &Tensor::zeros([1]), 1, 1);
    assert_eq!(oracle.data()[4], 45.0);
    assert_eq!(y.data()[4], 45.0);
    assert!(y.max_abs_diff(&oracle) < 1e-12);
}

#[test]
fn conv_strided_shape() {
    let y = conv(
        random(&[2, 3, 8, 8], 1, "x"),
        random(&[4, 3, 3, 3], 1, "w"),
        random(&[4], 1, "b"),
        2,
        1,
    );
    assert_eq!(y.shape(), &[2, 4, 4, 4]);
}

#[test]
fn conv_shape_errors_name_dimensions() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 2, 5, 5]));
    let w = g.constant(Tensor::zeros([3, 4, 3, 3]));
    let b = g.constant(Tensor::zeros([3]));
    let err = g.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
    assert!(err.contains("4 input channels") && err.contains("input has 2"), "{err}");

    let w = g.constant(Tensor::zeros([3, 2, 2, 2]));
    assert!(g.conv2d(x, w, b, 1, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_matches_nested_loops(
        seed in 0u64..1000,
        n in 1usize..=2,
        ci in 1usize..=4,
        co in 1usize..=4,
        h in 3usize..=9,
        w in 3usize..=9,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..=2,
        pad in 0usize..=1,
    ) {
        let x = random(&[n, ci, h, w], seed, "x");
        let wt = random(&[co, ci, k, k], seed, "w");
        let b = random(&[co], seed, "b");
        let got = conv(x.clone(), wt.clone(), b.clone(), stride, pad);
        let want = naive_conv(&x, &wt, &b, stride, pad);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(got.max_abs_diff(&want) < 1e-6);
    }
}

#[test]
fn conv_f32_agrees_with_reference() {
    let x = random(&[2, 4, 9, 9], 5, "x");
    let w = random(&[3, 4, 3, 3], 5, "w");
    let b = random(&[3], 5, "b");
    let want = naive_conv(&x, &w, &b, 1, 1);
    let mut g = Graph::<f32>::new();
    let (xv, wv, bv) = (g.constant(x.cast()), g.constant(w.cast()), g.constant(b.cast()));
    let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
    assert!(g.value(y).cast::<f64>().max_abs_diff(&want) < 1e-5);
}

#[test]
fn activation_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64([3], &[-1.0, 0.0, 2.0]).unwrap());
    let r = g.activation(x, Activation::Relu).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

    let z = g.constant(Tensor::scalar(0.0));
    let s = g.activation(z, Activation::Sigmoid).unwrap();
    assert_eq!(g.value(s).item(), 0.5);

    let logits = g.constant(Tensor::zeros([1, 2, 1, 1]));
    let p = g.activation(logits, Activation::SoftmaxChannel).unwrap();
    assert_eq!(g.value(p).data(), &[0.5, 0.5]);

    let flat = g.constant(Tensor::zeros([4]));
    assert!(g.softmax_channel(flat).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..10_000, k in 2usize..8) {
        let mut g = Graph::<f64>::new();
        let x = random(&[2, k, 3, 4], seed, "logits").map(|v| v * 10.0);
        let xv = g.constant(x);
        let p = g.softmax_channel(xv).unwrap();
        let d = g.value(p).data();
        for b in 0..2 {
            for px in 0..12 {
                let s: f64 = (0..k).map(|c| d[(b * k + c) * 12 + px]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                for c in 0..k {
                    let v = d[(b * k + c) * 12 + px];
                    prop_assert!(v > 0.0 && v < 1.0);
                }
            }
        }
    }

    #[test]
    fn upsample_preserves_constants(value in -5.0f64..5.0, factor in prop::sample::select(vec![2usize, 4, 8])) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([1, 2, 3, 5], value));
        let y = g.upsample(x, factor).unwrap();
        prop_assert!(g.value(y).data().iter().all(|&v| (v - value).abs() < 1e-12));
    }
}

#[test]
fn softmax_entries_strictly_inside_unit_interval() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(random(&[1, 5, 4, 4], 9, "x").map(|v| v * 5.0));
    let p = g.softmax_channel(x).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn upsample_examples() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full([1, 1, 2, 2], 3.0));
    let y = g.upsample(c, 8).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 3.0));

    let ramp = g.constant(Tensor::from_f64([1, 1, 1, 2], &[0.0, 1.0]).unwrap());
    let y = g.upsample(ramp, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 4]);
    assert_eq!(&g.value(y).data()[..4], &[0.0, 0.25, 0.75, 1.0]);

    let big = g.constant(Tensor::zeros([1, 4, 8, 8]));
    let y = g.upsample(big, 8).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 4, 64, 64]);

    assert!(g.upsample(big, 3).is_err());
}

#[test]
fn combine_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(random(&[1, 2, 4, 4], 3, "x"));
    let zeros = g.constant(Tensor::zeros([1, 2, 4, 4]));
    let sum = g.combine(x, zeros, Combine::Add).unwrap();
    assert_eq!(g.value(sum), g.value(x));

    let a = g.constant(Tensor::zeros([1, 2, 4, 4]));
    let b = g.constant(Tensor::zeros([1, 3, 4, 4]));
    let cat = g.combine(a, b, Combine::ConcatChannels).unwrap();
    assert_eq!(g.value(cat).shape(), &[1, 5, 4, 4]);

    let ones = g.constant(Tensor::ones([1, 2, 4, 4]));
    let gated = g.combine(ones, x, Combine::Mul).unwrap();
    assert_eq!(g.value(gated), g.value(x));

    assert!(g.combine(a, b, Combine::Add).is_err());
    let other = g.constant(Tensor::zeros([1, 3, 4, 5]));
    assert!(g.concat_channels(a, other).is_err());
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64([3], &[0.3, -2.0, 7.0]).unwrap(), true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

    assert!(g.backward(sq).is_err(), "non-scalar loss must be rejected");
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(random(&[1, 2, 3, 3], 4, "x"), true);
    let w = g.leaf(random(&[2, 2, 3, 3], 4, "w"), true);
    let b = g.leaf(random(&[2], 4, "b"), true);
    let y = g.conv2d(x, w, b, 1, 1).unwrap();
    let y = g.sigmoid(y).unwrap();
    let loss = g.mean(y).unwrap();

    g.backward(loss).unwrap();
    let once: Vec<Tensor<f64>> = [x, w, b].iter().map(|&v| g.grad(v).unwrap().clone()).collect();
    g.backward(loss).unwrap();
    for (v, single) in [x, w, b].iter().zip(&once) {
        let twice = g.grad(*v).unwrap();
        let doubled = single.map(|e| 2.0 * e);
        assert_eq!(twice, &doubled);
    }
    g.zero_grad();
    assert!(g.grad(x).is_none());
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &once[0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::scalar(2.0), true);
    let c = g.constant(Tensor::scalar(3.0));
    let p = g.mul(a, c).unwrap();
    g.backward(p).unwrap();
    assert_eq!(g.grad(a).unwrap().item(), 3.0);
    assert!(g.grad(c).is_none());
}

#[test]
fn finite_checks_flag_overflow() {
    let mut g = Graph::<f32>::new().with_finite_checks();
    let x = g.constant(Tensor::scalar(100.0));
    assert!(g.exp(x).is_err());
}

fn check(f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) -> f64 {
    grad_check(f, inputs, 1e-4).unwrap()
}

#[test]
fn grad_check_sum_of_squares() {
    let err = check(
        |g, v| {
            let sq = g.square(v[0])?;
            g.sum(sq)
        },
        &[random(&[7], 1, "x")],
    );
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_relu_away_from_kink() {
    for seed in 0..5 {
        let x = random(&[2, 3, 4, 4], seed, "x").map(|v| if v.abs() < 1e-2 { v + 0.05 } else { v });
        assert!(x.data().iter().all(|v| v.abs() > 10.0 * 1e-4));
        let err = check(
            |g, v| {
                let r = g.relu(v[0])?;
                let sq = g.square(r)?;
                g.sum(sq)
            },
            &[x],
        );
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn grad_check_conv_relu_softmax_cross_entropy_chain() {
    for seed in 0..5 {
        let labels: Vec<u8> = {
            let mut r = rng::stream(seed, "labels");
            (0..36).map(|_| r.random_range(0..3u8)).collect()
        };
        let err = check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                let y = g.relu(y)?;
                let p = g.softmax_channel(y)?;
                let p = g.scale(p, 4.0)?;
                g.softmax_cross_entropy(p, &labels)
            },
            &[
                random(&[1, 2, 6, 6], seed, "x"),
                random(&[3, 2, 3, 3], seed, "w"),
                random(&[3], seed, "b").map(|v| v + 1.5),
            ],
        );
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

/// Every differentiable primitive, each under a random linear read-out so
/// that all output coordinates carry distinct weights.
#[test]
fn grad_check_every_primitive() {
    type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        (
            "conv2d stride 2",
            vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 1)),
        ),
        (
            "conv2d 1x1",
            vec![vec![2, 3, 3, 3], vec![2, 3, 1, 1], vec![2]],
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 0)),
        ),
        ("sigmoid", vec![vec![2, 3]], Box::new(|g, v| g.sigmoid(v[0]))),
        (
            "softmax_channel",
            vec![vec![2, 4, 2, 3]],
            Box::new(|g, v| g.softmax_channel(v[0])),
        ),
        (
            "upsample x2",
            vec![vec![1, 2, 3, 2]],
            Box::new(|g, v| g.upsample(v[0], 2)),
        ),
        (
            "upsample x8",
            vec![vec![1, 1, 2, 2]],
            Box::new(|g, v| g.upsample(v[0], 8)),
        ),
        ("add", vec![vec![6], vec![6]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![vec![6], vec![6]], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![vec![6], vec![6]], Box::new(|g, v| g.mul(v[0], v[1]))),
        (
            "concat",
            vec![vec![2, 1, 2, 2], vec![2, 3, 2, 2]],
            Box::new(|g, v| g.concat_channels(v[0], v[1])),
        ),
        (
            "affine",
            vec![vec![5]],
            Box::new(|g, v| g.affine(v[0], -1.7, 0.3)),
        ),
        ("exp", vec![vec![5]], Box::new(|g, v| g.exp(v[0]))),
        ("square", vec![vec![5]], Box::new(|g, v| g.square(v[0]))),
        ("mean", vec![vec![2, 3]], Box::new(|g, v| g.mean(v[0]))),
        ("sum", vec![vec![2, 3]], Box::new(|g, v| g.sum(v[0]))),
    ];
    for (name, shapes, build) in &cases {
        for seed in 0..5 {
            let mut inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| random(s, seed, &format!("{name}/{i}")))
                .collect();
            let probe = {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                let out = build(&mut g, &vars).unwrap();
                random(g.value(out).shape(), seed, &format!("{name}/probe"))
            };
            inputs.push(probe);
            let err = check(
                |g, v| {
                    let (xs, w) = v.split_at(v.len() - 1);
                    let y = build(g, xs)?;
                    let weighted = g.mul(y, w[0])?;
                    g.sum(weighted)
                },
                &inputs,
            );
            assert!(err < 1e-5, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn grad_check_abs_away_from_zero() {
    for seed in 0..5 {
        let x = random(&[8], seed, "x").map(|v| if v.abs() < 0.01 { 0.5 } else { v });
        let err = check(
            |g, v| {
                let a = g.abs(v[0])?;
                let s = g.scale(a, 3.0)?;
                g.sum(s)
            },
            &[x],
        );
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}
