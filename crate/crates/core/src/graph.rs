//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node in an
//! append-only list, so node order is already a topological order. Values
//! are immutable once recorded. [`Graph::backward`] walks the list once in
//! reverse and returns the adjoints as a separate [`Gradients`] table.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    Pow,
    Log,
    Clamp,
    Relu,
    Sigmoid,
    Sum,
    Mean,
    Reshape,
    MatMul,
    Conv2d,
    MaxPool,
    AvgPool,
    Upsample,
    Concat,
    BatchNorm,
    Dropout,
    GlobalMaxPool,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::AddScalar,
        OpKind::MulScalar,
        OpKind::Pow,
        OpKind::Log,
        OpKind::Clamp,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::MaxPool,
        OpKind::AvgPool,
        OpKind::Upsample,
        OpKind::Concat,
        OpKind::BatchNorm,
        OpKind::Dropout,
        OpKind::GlobalMaxPool,
    ];

    /// Inverse of [`OpKind::name`].
    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::AddScalar => "add_scalar",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Pow => "pow",
            OpKind::Log => "log",
            OpKind::Clamp => "clamp",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool => "maxpool",
            OpKind::AvgPool => "avgpool",
            OpKind::Upsample => "bilinear_upsample",
            OpKind::Concat => "concat_channels",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Dropout => "dropout",
            OpKind::GlobalMaxPool => "global_maxpool",
        }
    }
}

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the batch's own statistics.
    Batch { eps: f64 },
    /// Normalize with fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Batch statistics observed by a train-mode batch norm, for updating the
/// running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Pow(Var, f64),
    Log(Var),
    Clamp(Var, f64, f64),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, factor: usize },
    Upsample { x: Var, factor: usize },
    Concat(Vec<Var>),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Dropout { x: Var, mask: Vec<f64> },
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Pow(..) => OpKind::Pow,
            Op::Log(..) => OpKind::Log,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Reshape(..) => OpKind::Reshape,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Concat(..) => OpKind::Concat,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::GlobalMaxPool { .. } => OpKind::GlobalMaxPool,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Pow(a, _)
            | Op::Log(a)
            | Op::Clamp(a, ..)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Upsample { x, .. }
            | Op::Dropout { x, .. }
            | Op::GlobalMaxPool { x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    finite: bool,
}

/// One recorded forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    fault: Option<OpKind>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
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

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Deliberately corrupts the backward rule of one op kind. Only meant
    /// for checking that gradient verification notices broken rules.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let inputs_finite = inputs.iter().all(|i| self.nodes[i.0].finite);
        let finite = value.is_finite();
        if inputs_finite && !finite {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value from finite inputs",
                op.kind().name()
            )));
        }
        self.nodes.push(Node { value, op, requires_grad, finite });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Its gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let finite = t.is_finite();
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad, finite });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// A trainable leaf keyed by an external parameter id. Repeated calls
    /// with the same id return the same node.
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut value = Tensor::new(t.shape(), t.data().to_vec()).expect("valid parameter tensor");
        value.set_requires_grad(true);
        let v = self.leaf(value);
        self.params.insert(id, v);
        v
    }

    /// Parameter ids recorded in this graph with their leaf nodes.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(false)
        } else if self.value(b).numel() == 1 {
            Ok(true)
        } else {
            Err(Error::mismatch(op, sa, sb))
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let scalar = self.binary(a, b, name)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data = if scalar {
            let s = bv[0];
            av.data().iter().map(|&x| f(x, s)).collect()
        } else {
            av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "div", |x, y| x / y)?;
        self.push(t, Op::Div(a, b))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::new(av.shape(), av.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map(a, |x| x + c);
        self.push(t, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map(a, |x| x * c);
        self.push(t, Op::MulScalar(a, c))
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Result<Var> {
        let neg = self.mul_scalar(a, -1.0)?;
        self.add_scalar(neg, c)
    }

    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var> {
        let t = self.map(a, |x| x.powf(exponent));
        self.push(t, Op::Pow(a, exponent))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::ln);
        self.push(t, Op::Log(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping bites.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.map(a, |x| x.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(t, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().with_requires_grad(false).reshape(shape)?;
        self.push(t, Op::Reshape(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let t = Tensor::new(&[m, n], out)?;
        self.push(t, Op::MatMul(a, b))
    }

    /// 2-D cross-correlation of `x: [B, C, H, W]` with `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_c] {
                return Err(Error::mismatch("conv2d", self.shape(b), &[geom.out_c]));
            }
        }
        let out =
            kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &geom);
        let t = Tensor::new(&[geom.batch, geom.out_c, geom.oh, geom.ow], out)?;
        self.push(t, Op::Conv2d { x, w, b, geom })
    }

    fn spatial(&self, x: Var, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape(x) {
            [b, c, h, w] => Ok([b, c, h, w]),
            ref s => {
                Err(Error::InvalidShape { shape: s.to_vec(), reason: format!("{op} expects a [B, C, H, W] tensor") })
            }
        }
    }

    fn check_divisible(&self, x: Var, factor: usize, op: &'static str) -> Result<[usize; 4]> {
        let s = self.spatial(x, op)?;
        if factor == 0 || s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(Error::geometry(op, format!("{}x{} not divisible by factor {factor}", s[2], s[3])));
        }
        Ok(s)
    }

    /// Non-overlapping max pooling with window = stride = `factor`.
    pub fn maxpool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [b, c, h, w] = self.check_divisible(x, factor, "maxpool")?;
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), self.shape(x), factor);
        let t = Tensor::new(&[b, c, h / factor, w / factor], out)?;
        self.push(t, Op::MaxPool { x, argmax })
    }

    pub fn avgpool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [b, c, h, w] = self.check_divisible(x, factor, "avgpool")?;
        let out = kernels::avgpool_forward(self.value(x).data(), self.shape(x), factor);
        let t = Tensor::new(&[b, c, h / factor, w / factor], out)?;
        self.push(t, Op::AvgPool { x, factor })
    }

    /// Bilinear up-sampling by an integer factor, half-pixel centres.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [b, c, h, w] = self.spatial(x, "bilinear_upsample")?;
        if factor == 0 {
            return Err(Error::geometry("bilinear_upsample", "factor must be at least 1"));
        }
        let out = kernels::upsample_forward(self.value(x).data(), self.shape(x), factor);
        let t = Tensor::new(&[b, c, h * factor, w * factor], out)?;
        self.push(t, Op::Upsample { x, factor })
    }

    /// Concatenation along axis 1, in list order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of an empty list".into()))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(Error::InvalidShape { shape: s0, reason: "concat needs rank >= 2".into() });
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::mismatch("concat_channels", &s0, s));
            }
            channels += s[1];
        }
        let batch = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut data = Vec::with_capacity(batch * channels * inner);
        for bi in 0..batch {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[bi * chunk..(bi + 1) * chunk]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::Concat(parts.to_vec()))
    }

    /// Per-channel normalization followed by `gamma · x̂ + beta`.
    ///
    /// With [`NormStats::Batch`] the returned moments are the batch's own
    /// mean and unbiased variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let [b, c, h, w] = self.spatial(x, "batchnorm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::mismatch("batchnorm", self.shape(p), &[c]));
            }
        }
        let xs = self.value(x).data();
        let count = b * h * w;
        let (mean, inv_std, moments, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                if count < 2 {
                    return Err(Error::DegenerateBatch { op: "batchnorm", count });
                }
                let (mean, var) = kernels::channel_stats(xs, self.shape(x));
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let unbiased = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
                let moments = BatchMoments { mean: mean.clone(), var: unbiased };
                (mean, inv_std, Some(moments), true)
            }
            NormStats::Running { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::mismatch("batchnorm", &[mean.len(), var.len()], &[c]));
                }
                let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (mean.to_vec(), inv_std, None, false)
            }
        };
        let shape = self.shape(x).to_vec();
        let xhat = kernels::map_channels(xs, &shape, |ch, v| (v - mean[ch]) * inv_std[ch]);
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let y = kernels::map_channels(&xhat, &shape, |ch, v| g[ch] * v + be[ch]);
        let t = Tensor::new(&shape, y)?;
        let var = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats })?;
        Ok((var, moments))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1 / (1 - rate)`. The mask is a pure function of `seed` and shape.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let n = self.value(x).numel();
        let keep = 1.0 / (1.0 - rate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, Op::Dropout { x, mask })
    }

    /// Max over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_maxpool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.spatial(x, "global_maxpool")?;
        let xs = self.value(x).data();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * c);
        let mut argmax = Vec::with_capacity(b * c);
        for p in 0..b * c {
            let mut best = p * hw;
            for i in p * hw..(p + 1) * hw {
                if xs[i] > xs[best] {
                    best = i;
                }
            }
            out.push(xs[best]);
            argmax.push(best);
        }
        let t = Tensor::new(&[b, c], out)?;
        self.push(t, Op::GlobalMaxPool { x, argmax })
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, delta) in self.local_grads(node, &g) {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], delta);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                vec![(*a, g.to_vec()), (*b, self.reduce_to(*b, g.to_vec()))]
            }
            Op::Sub(a, b) => {
                let neg = g.iter().map(|v| -v).collect();
                vec![(*a, g.to_vec()), (*b, self.reduce_to(*b, neg))]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut v = Vec::new();
                if self.wants(*a) {
                    let da = if bv.len() == 1 {
                        g.iter().map(|x| x * bv[0]).collect()
                    } else {
                        g.iter().zip(bv).map(|(x, y)| x * y).collect()
                    };
                    v.push((*a, da));
                }
                if self.wants(*b) {
                    let db = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    v.push((*b, self.reduce_to(*b, db)));
                }
                v
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bat = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
                let mut v = Vec::new();
                if self.wants(*a) {
                    v.push((*a, g.iter().enumerate().map(|(i, x)| x / bat(i)).collect()));
                }
                if self.wants(*b) {
                    let db = g.iter().enumerate().map(|(i, x)| -x * av[i] / (bat(i) * bat(i))).collect();
                    v.push((*b, self.reduce_to(*b, db)));
                }
                v
            }
            Op::AddScalar(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::MulScalar(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::Pow(a, e) => {
                let av = self.value(*a).data();
                let d = g.iter().zip(av).map(|(x, y)| x * e * y.powf(e - 1.0)).collect();
                vec![(*a, d)]
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                vec![(*a, g.iter().zip(av).map(|(x, y)| x / y).collect())]
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                let d = g.iter().zip(av).map(|(x, y)| if y >= lo && y <= hi { *x } else { 0.0 }).collect();
                vec![(*a, d)]
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let d = g.iter().zip(av).map(|(x, y)| if *y > 0.0 { *x } else { 0.0 }).collect();
                vec![(*a, d)]
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                vec![(*a, g.iter().zip(yv).map(|(x, y)| x * y * (1.0 - y)).collect())]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut v = Vec::new();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, self.value(*b).data(), true, &mut da, false);
                    v.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.value(*a).data(), true, g, false, &mut db, false);
                    v.push((*b, db));
                }
                v
            }
            Op::Conv2d { x, w, b, geom } => {
                let need = [self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b))];
                let grads = kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), g, geom, need);
                let mut v = Vec::new();
                v.extend(grads.dx.map(|d| (*x, d)));
                v.extend(grads.dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (b, grads.db) {
                    v.push((*b, d));
                }
                v
            }
            Op::MaxPool { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (gi, &src) in g.iter().zip(argmax) {
                    d[src] += gi;
                }
                vec![(*x, d)]
            }
            Op::AvgPool { x, factor } => {
                vec![(*x, kernels::avgpool_backward(g, self.shape(*x), *factor))]
            }
            Op::Upsample { x, factor } => {
                vec![(*x, kernels::upsample_backward(g, self.shape(*x), *factor))]
            }
            Op::Concat(parts) => {
                let shape = node.value.shape();
                let (batch, channels) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.shape(p)[1];
                    let mut d = Vec::with_capacity(batch * c * inner);
                    for bi in 0..batch {
                        let start = (bi * channels + offset) * inner;
                        d.extend_from_slice(&g[start..start + c * inner]);
                    }
                    offset += c;
                    v.push((p, d));
                }
                v
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let shape = node.value.shape();
                let gam = self.value(*gamma).data();
                let mut v = Vec::new();
                let sum_g = kernels::channel_sums(g, None, shape);
                let sum_gx = kernels::channel_sums(g, Some(xhat), shape);
                if self.wants(*x) {
                    let d = if *batch_stats {
                        let n = (shape[0] * shape[2..].iter().product::<usize>()) as f64;
                        let mut i = 0;
                        kernels::map_channels(g, shape, |ch, gv| {
                            let r = gam[ch] * inv_std[ch] * (gv - sum_g[ch] / n - xhat[i] * sum_gx[ch] / n);
                            i += 1;
                            r
                        })
                    } else {
                        kernels::map_channels(g, shape, |ch, gv| gam[ch] * inv_std[ch] * gv)
                    };
                    v.push((*x, d));
                }
                if self.wants(*gamma) {
                    v.push((*gamma, sum_gx));
                }
                if self.wants(*beta) {
                    v.push((*beta, sum_g));
                }
                v
            }
            Op::Dropout { x, mask } => {
                vec![(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect())]
            }
        };
        if self.fault == Some(node.op.kind()) {
            for (_, d) in out.iter_mut() {
                d.iter_mut().for_each(|v| *v *= 0.5);
            }
        }
        out
    }

    /// Sums a full-size adjoint down to `target`'s shape when `target` was
    /// broadcast as a scalar.
    fn reduce_to(&self, target: Var, d: Vec<f64>) -> Vec<f64> {
        if self.value(target).numel() == 1 && d.len() != 1 {
            vec![d.iter().sum()]
        } else {
            d
        }
    }
}
