//! Layers with owned parameters: convolution, batch norm and the
//! conv + BN + ReLU block the architectures are assembled from.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NormStats, Var};
use crate::tensor::Tensor;

/// Source of initial convolution weights.
pub trait Init {
    /// `n` values in `[-bound, bound)`.
    fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64>;
}

impl<R: Rng> Init for R {
    fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| self.random_range(-bound..bound)).collect()
    }
}

/// All-zero weights, for builds that only need names and shapes.
pub struct ZeroInit;

impl Init for ZeroInit {
    fn uniform(&mut self, n: usize, _bound: f64) -> Vec<f64> {
        vec![0.0; n]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers (running statistics) are checkpointed but never optimized.
    pub trainable: bool,
}

/// Named registry of every parameter and buffer of a network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.entries.push(Entry { name, tensor, trainable });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        self.insert(name.into(), tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        self.insert(name.into(), tensor, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry] {
        &mut self.entries
    }

    /// Trainable parameters only.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Entry)> {
        self.entries.iter().enumerate().filter(|(_, e)| e.trainable).map(|(i, e)| (ParamId(i), e))
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params().map(|(_, e)| e.tensor.numel()).sum()
    }

    /// Trainable scalar count over parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params().filter(|(_, e)| e.name.starts_with(prefix)).map(|(_, e)| e.tensor.numel()).sum()
    }

    /// Records a parameter as a graph leaf.
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(id.0, self.get(id))
    }

    /// Moves the gradients of every parameter recorded in `g` into the
    /// parameters' own gradient buffers.
    pub fn absorb_grads(&mut self, g: &Graph, grads: &mut crate::graph::Gradients) -> Result<()> {
        let mut recorded: Vec<_> = g.param_vars().collect();
        recorded.sort();
        for (id, var) in recorded {
            if let Some(d) = grads.take(var) {
                self.entries[id].tensor.accumulate_grad(&d)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `kernel / 2` on every side, which preserves H and W at stride 1 for
    /// odd kernels.
    Same,
    Explicit(usize),
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    /// Kaiming-uniform weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
        bias: bool,
        init: &mut impl Init,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 {
            return Err(Error::Config(format!("conv {name}: channels and kernel must be positive")));
        }
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = out_channels * in_channels * kernel * kernel;
        let data = init.uniform(n, bound);
        let weight = store
            .add_param(format!("{name}.weight"), Tensor::new(&[out_channels, in_channels, kernel, kernel], data)?)?;
        let bias =
            if bias { Some(store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_channels])?)?) } else { None };
        Ok(Conv2d { in_channels, out_channels, kernel, stride: 1, padding, weight, bias })
    }

    pub fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => self.kernel / 2,
            Padding::Explicit(p) => p,
        }
    }

    /// `out · in · k² (+ out)`.
    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.var(g, self.weight);
        let b = self.bias.map(|b| store.var(g, b));
        g.conv2d(x, w, b, self.stride, self.pad())
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            channels,
            gamma: store.add_param(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)?)?,
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels])?)?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])?)?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)?)?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates; eval mode uses the running estimates only.
    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = store.var(g, self.gamma);
        let beta = store.var(g, self.beta);
        match mode {
            Mode::Train => {
                let (y, moments) = g.batch_norm(x, gamma, beta, NormStats::Batch { eps: self.eps })?;
                let moments = moments.expect("batch statistics in train mode");
                let m = self.momentum;
                let rm = store.get_mut(self.running_mean).data_mut();
                rm.iter_mut().zip(&moments.mean).for_each(|(r, b)| *r = (1.0 - m) * *r + m * b);
                let rv = store.get_mut(self.running_var).data_mut();
                rv.iter_mut().zip(&moments.var).for_each(|(r, b)| *r = (1.0 - m) * *r + m * b);
                Ok(y)
            }
            Mode::Eval => {
                let stats = NormStats::Running {
                    mean: store.get(self.running_mean).data(),
                    var: store.get(self.running_var).data(),
                    eps: self.eps,
                };
                Ok(g.batch_norm(x, gamma, beta, stats)?.0)
            }
        }
    }
}

/// `D_F × D_F` convolution without bias, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        init: &mut impl Init,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                in_channels,
                out_channels,
                kernel,
                Padding::Same,
                false,
                init,
            )?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, mode)?;
        g.relu(y)
    }
}
