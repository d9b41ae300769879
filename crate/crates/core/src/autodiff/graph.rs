use super::kernels::{self, ConvGeometry};
use crate::error::{contract, Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    SoftmaxChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    Add,
    ConcatChannels,
    Mul,
}

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxChannel(Var),
    Upsample {
        input: Var,
        factor: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat(Var, Var),
    /// `scale·x + shift`
    Affine {
        input: Var,
        scale: f64,
    },
    Abs(Var),
    Square(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        counted: usize,
    },
    BalancedBce {
        logits: Var,
        edges: Vec<bool>,
        w_edge: f64,
        w_plain: f64,
    },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one.
    grad: Option<Tensor<T>>,
}

/// Define-by-run computation record.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Contract(format!(
                "non-finite value produced by {:?}",
                op_name(&op)
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        contract!(sa == sb, "{}: shapes {:?} and {:?} differ", what, sa, sb);
        Ok(())
    }

    fn elementwise(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
        )?;
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new([geom.n, geom.c_out, geom.h_out, geom.w_out], data)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::SoftmaxChannel => self.softmax_channel(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.elementwise(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.elementwise(x, Op::Sigmoid(x), |v| T::of(sigmoid(v.as_f64())))
    }

    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        contract!(
            t.shape().len() >= 3,
            "softmax_channel needs at least 3 dims, got {:?}",
            t.shape()
        );
        let dims = nchw(t.shape());
        let value = Tensor::new(t.shape(), kernels::softmax_channel(dims, t.data()))?;
        self.push(value, Op::SoftmaxChannel(x), &[x])
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        contract!(
            matches!(factor, 2 | 4 | 8),
            "bilinear upsample factor must be 2, 4 or 8, got {}",
            factor
        );
        let dims = self.value(x).dims4()?;
        let data = kernels::upsample_forward(dims, factor, self.value(x).data());
        let (n, c, h, w) = dims;
        let value = Tensor::new([n, c, h * factor, w * factor], data)?;
        self.push(value, Op::Upsample { input: x, factor }, &[x])
    }

    pub fn combine(&mut self, a: Var, b: Var, kind: Combine) -> Result<Var> {
        match kind {
            Combine::Add => self.add(a, b),
            Combine::Mul => self.mul(a, b),
            Combine::ConcatChannels => self.concat_channels(a, b),
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op_name(&op))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        contract!(
            sa.len() >= 2
                && sa.len() == sb.len()
                && sa[0] == sb[0]
                && sa[2..] == sb[2..],
            "concat_channels: shapes {:?} and {:?} differ outside the channel axis",
            sa,
            sb
        );
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let inner: usize = sa[2..].iter().product();
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for i in 0..n {
            data.extend_from_slice(&da[i * ca * inner..(i + 1) * ca * inner]);
            data.extend_from_slice(&db[i * cb * inner..(i + 1) * cb * inner]);
        }
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Concat(a, b), &[a, b])
    }

    /// `scale·x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, t) = (T::of(scale), T::of(shift));
        self.elementwise(x, Op::Affine { input: x, scale }, |v| s * v + t)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.elementwise(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.elementwise(x, Op::Square(x), |v| v * v)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.elementwise(x, Op::Exp(x), |v| v.exp())
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        contract!(t.numel() > 0, "mean of an empty tensor");
        let m = t.sum() / T::of(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean negative log-likelihood of the labelled class over pixels whose
    /// label is not [`IGNORE_LABEL`]. `labels` is `N·H·W` in NHW order.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let (n, k, h, w) = self.value(logits).dims4()?;
        contract!(
            labels.len() == n * h * w,
            "cross-entropy: {} labels for logits of spatial size {}x{}x{}",
            labels.len(),
            n,
            h,
            w
        );
        let hw = h * w;
        let x = self.value(logits).data();
        let mut total = 0.0f64;
        let mut counted = 0usize;
        for (i, &label) in labels.iter().enumerate() {
            if label == IGNORE_LABEL {
                continue;
            }
            contract!(
                (label as usize) < k,
                "cross-entropy: label {} out of range for {} classes",
                label,
                k
            );
            let (b, p) = (i / hw, i % hw);
            let at = |c: usize| x[(b * k + c) * hw + p].as_f64();
            let max = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|c| (at(c) - max).exp()).sum::<f64>().ln();
            total += lse - at(label as usize);
            counted += 1;
        }
        contract!(
            counted > 0,
            "cross-entropy: every pixel is ignored, the mean is undefined"
        );
        let value = Tensor::scalar(T::of(total / counted as f64));
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                counted,
            },
            &[logits],
        )
    }

    /// Class-balanced binary cross-entropy on boundary logits.
    ///
    /// Edge pixels are weighted by the non-edge fraction and vice versa; both
    /// terms are sums over their pixel sets, not means.
    pub fn balanced_bce(&mut self, logits: Var, edges: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        contract!(
            t.numel() == edges.len(),
            "balanced_bce: {} ground-truth pixels for {} predictions",
            edges.len(),
            t.numel()
        );
        contract!(!edges.is_empty(), "balanced_bce: empty boundary map");
        let total = edges.len() as f64;
        let n_edge = edges.iter().filter(|&&e| e).count() as f64;
        let w_edge = (total - n_edge) / total;
        let w_plain = n_edge / total;
        let mut loss = 0.0;
        for (&z, &e) in t.data().iter().zip(edges) {
            let z = z.as_f64();
            // -log sigmoid(z) = softplus(-z), -log(1 - sigmoid(z)) = softplus(z)
            loss += if e {
                w_edge * softplus(-z)
            } else {
                w_plain * softplus(z)
            };
        }
        self.push(
            Tensor::scalar(T::of(loss)),
            Op::BalancedBce {
                logits,
                edges: edges.to_vec(),
                w_edge,
                w_plain,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`, adding into every reachable leaf
    /// that requires a gradient. Calling it again without
    /// [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        contract!(
            self.value(loss).is_scalar(),
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(dy) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[id] = Some(dy);
                continue;
            }
            self.propagate(id, &dy, &mut adj);
        }

        for (id, slot) in adj.into_iter().enumerate() {
            let (Some(g), Op::Leaf) = (slot, &self.nodes[id].op) else {
                continue;
            };
            let node = &mut self.nodes[id];
            let g = Tensor::new(node.value.shape(), g)?;
            match node.grad.as_mut() {
                Some(acc) => acc.add_assign(&g)?,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, dy: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let g = kernels::conv2d_backward(
                    geom,
                    val(*input),
                    val(*weight),
                    dy,
                    (wants(*input), wants(*weight), wants(*bias)),
                );
                accumulate(adj, *input, g.input);
                accumulate(adj, *weight, g.weight);
                accumulate(adj, *bias, g.bias);
            }
            Op::Relu(x) => {
                let xs = val(*x);
                let g = dy
                    .iter()
                    .zip(xs)
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(adj, *x, Some(g));
            }
            Op::Sigmoid(x) => {
                let g = dy
                    .iter()
                    .zip(y)
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                accumulate(adj, *x, Some(g));
            }
            Op::SoftmaxChannel(x) => {
                let (n, c, h, w) = nchw(node.value.shape());
                let hw = h * w;
                let mut g = vec![T::zero(); y.len()];
                for b in 0..n {
                    let base = b * c * hw;
                    for p in 0..hw {
                        let dot: T = (0..c)
                            .map(|k| dy[base + k * hw + p] * y[base + k * hw + p])
                            .sum();
                        for k in 0..c {
                            let i = base + k * hw + p;
                            g[i] = y[i] * (dy[i] - dot);
                        }
                    }
                }
                accumulate(adj, *x, Some(g));
            }
            Op::Upsample { input, factor } => {
                let dims = self.nodes[input.0].value.dims4().expect("checked in forward");
                accumulate(
                    adj,
                    *input,
                    Some(kernels::upsample_backward(dims, *factor, dy)),
                );
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, Some(dy.to_vec()));
                }
                if wants(*b) {
                    accumulate(adj, *b, Some(dy.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, Some(dy.to_vec()));
                }
                if wants(*b) {
                    accumulate(adj, *b, Some(dy.iter().map(|&d| -d).collect()));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let g = dy.iter().zip(val(*b)).map(|(&d, &v)| d * v).collect();
                    accumulate(adj, *a, Some(g));
                }
                if wants(*b) {
                    let g = dy.iter().zip(val(*a)).map(|(&d, &v)| d * v).collect();
                    accumulate(adj, *b, Some(g));
                }
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (
                    self.nodes[a.0].value.shape(),
                    self.nodes[b.0].value.shape(),
                );
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let mut ga = Vec::with_capacity(sa[0] * ca);
                let mut gb = Vec::with_capacity(sb[0] * cb);
                for chunk in dy.chunks_exact(ca + cb) {
                    ga.extend_from_slice(&chunk[..ca]);
                    gb.extend_from_slice(&chunk[ca..]);
                }
                if wants(*a) {
                    accumulate(adj, *a, Some(ga));
                }
                if wants(*b) {
                    accumulate(adj, *b, Some(gb));
                }
            }
            Op::Affine { input, scale } => {
                let s = T::of(*scale);
                accumulate(adj, *input, Some(dy.iter().map(|&d| d * s).collect()));
            }
            Op::Abs(x) => {
                let g = dy
                    .iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| {
                        if v > T::zero() {
                            d
                        } else if v < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(adj, *x, Some(g));
            }
            Op::Square(x) => {
                let two = T::of(2.0);
                let g = dy.iter().zip(val(*x)).map(|(&d, &v)| two * v * d).collect();
                accumulate(adj, *x, Some(g));
            }
            Op::Exp(x) => {
                let g = dy.iter().zip(y).map(|(&d, &e)| d * e).collect();
                accumulate(adj, *x, Some(g));
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                accumulate(adj, *x, Some(vec![dy[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                accumulate(adj, *x, Some(vec![dy[0] / T::of(n as f64); n]));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                counted,
            } => {
                let t = &self.nodes[logits.0].value;
                let (n, k, h, w) = t.dims4().expect("checked in forward");
                let hw = h * w;
                let probs = kernels::softmax_channel((n, k, h, w), t.data());
                let scale = dy[0] / T::of(*counted as f64);
                let mut g = vec![T::zero(); probs.len()];
                for (i, &label) in labels.iter().enumerate() {
                    if label == IGNORE_LABEL {
                        continue;
                    }
                    let (b, p) = (i / hw, i % hw);
                    for c in 0..k {
                        let j = (b * k + c) * hw + p;
                        let target = if c == label as usize { T::one() } else { T::zero() };
                        g[j] = (probs[j] - target) * scale;
                    }
                }
                accumulate(adj, *logits, Some(g));
            }
            Op::BalancedBce {
                logits,
                edges,
                w_edge,
                w_plain,
            } => {
                let z = val(*logits);
                let d = dy[0].as_f64();
                let g = z
                    .iter()
                    .zip(edges)
                    .map(|(&z, &e)| {
                        let s = sigmoid(z.as_f64());
                        T::of(if e { -w_edge * (1.0 - s) } else { w_plain * s } * d)
                    })
                    .collect();
                accumulate(adj, *logits, Some(g));
            }
        }
    }
}

fn accumulate<T: Element>(adj: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match adj[v.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => adj[v.0] = Some(g),
    }
}

/// Treats any `[N, C, ...]` shape as NCHW with the trailing dims flattened.
fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    let inner: usize = shape[2..].iter().product();
    (shape[0], shape[1], inner, 1)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::SoftmaxChannel(_) => "softmax_channel",
        Op::Upsample { .. } => "upsample",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Concat(..) => "concat_channels",
        Op::Affine { .. } => "affine",
        Op::Abs(_) => "abs",
        Op::Square(_) => "square",
        Op::Exp(_) => "exp",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::BalancedBce { .. } => "balanced_bce",
    }
}
