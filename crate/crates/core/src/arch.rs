//! Network builders for the three decoder families.
//!
//! Stages are numbered from 1 (finest) to `N` (deepest). Stage `i` of the
//! encoder has `base · 2^i` channels. The bottleneck `X_En^N` doubles as
//! decoder stage `N`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvBnRelu, Init, Mode, Padding, ParamStore, ZeroInit};
use crate::tensor::Tensor;

/// Largest supported depth. Keeps `base · 2^N` and the pooling factors far
/// from overflow.
pub const MAX_DEPTH: usize = 10;

/// Dropout rate in front of the classification head.
pub const CGM_DROPOUT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Unet,
    UnetPlusPlus,
    Unet3Plus,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Unet, Variant::UnetPlusPlus, Variant::Unet3Plus];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::UnetPlusPlus => "unetpp",
            Variant::Unet3Plus => "unet3p",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected unet, unetpp or unet3p)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub variant: Variant,
    pub depth: usize,
    pub base_channels: usize,
    pub skip_channels: usize,
    pub kernel: usize,
    pub input_channels: usize,
    pub deep_supervision: bool,
    pub cgm: bool,
    pub dropout_rate: f64,
    /// Side heads on every UNet++ decoder stage. Off by default; only used
    /// when `deep_supervision` is also set.
    pub unetpp_level_heads: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            variant: Variant::Unet3Plus,
            depth: 5,
            base_channels: 32,
            skip_channels: 64,
            kernel: 3,
            input_channels: 3,
            deep_supervision: true,
            cgm: false,
            dropout_rate: CGM_DROPOUT,
            unetpp_level_heads: false,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(2..=MAX_DEPTH).contains(&self.depth) {
            return bad(format!("depth must be in 2..={MAX_DEPTH}, got {}", self.depth));
        }
        if self.base_channels == 0 || self.skip_channels == 0 || self.input_channels == 0 {
            return bad("base_channels, skip_channels and input_channels must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.base_channels.checked_shl(self.depth as u32).is_none_or(|w| w >> self.depth != self.base_channels) {
            return bad("base_channels · 2^depth overflows".into());
        }
        Ok(())
    }

    /// Encoder width `d(X_En^i) = base · 2^i`.
    pub fn encoder_width(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Width of `X_De^i`. The bottleneck keeps its encoder width.
    pub fn decoder_width(&self, stage: usize) -> usize {
        if stage == self.depth {
            return self.encoder_width(stage);
        }
        match self.variant {
            Variant::Unet | Variant::UnetPlusPlus => self.encoder_width(stage),
            Variant::Unet3Plus => self.fused_width(),
        }
    }

    /// UNet 3+ aggregation width `skip · N`.
    pub fn fused_width(&self) -> usize {
        self.skip_channels * self.depth
    }

    /// Decoder stages that carry a side head, finest first.
    pub fn side_stages(&self) -> Vec<usize> {
        let all = match self.variant {
            Variant::UnetPlusPlus => self.deep_supervision && self.unetpp_level_heads,
            _ => self.deep_supervision,
        };
        if all {
            (1..=self.depth).collect()
        } else {
            vec![1]
        }
    }

    /// Spatial dims must survive `N - 1` halvings.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::geometry("network", format!("expected [B, C, H, W], got {shape:?}")));
        }
        if shape[1] != self.input_channels {
            return Err(Error::geometry(
                "network",
                format!("expected {} input channels, got {}", self.input_channels, shape[1]),
            ));
        }
        let m = 1usize << (self.depth - 1);
        if !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) {
            return Err(Error::geometry(
                "network",
                format!("spatial dims {}x{} not divisible by 2^(N-1) = {m}", shape[2], shape[3]),
            ));
        }
        Ok(())
    }
}

/// One input of a UNet 3+ decoder node, before its branch convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// `X_En^from` max-pooled by `factor`.
    Pooled { from: usize, factor: usize },
    /// `X_En^from` at its own scale.
    Direct { from: usize },
    /// `X_De^from` bilinearly upsampled by `factor`.
    Upsampled { from: usize, factor: usize },
}

impl Branch {
    /// The branches feeding decoder node `stage` of a depth-`n` UNet 3+.
    pub fn full_scale(stage: usize, n: usize) -> Vec<Branch> {
        (1..=n)
            .map(|k| match k.cmp(&stage) {
                std::cmp::Ordering::Less => Branch::Pooled { from: k, factor: 1 << (stage - k) },
                std::cmp::Ordering::Equal => Branch::Direct { from: k },
                std::cmp::Ordering::Greater => Branch::Upsampled { from: k, factor: 1 << (k - stage) },
            })
            .collect()
    }
}

/// Upsample by 2, one conv to the target width, then a two-conv fusion of
/// the concatenated skips. Used by UNet and every UNet++ node.
#[derive(Clone, Debug)]
struct NestedNode {
    up: ConvBnRelu,
    conv1: ConvBnRelu,
    conv2: ConvBnRelu,
}

impl NestedNode {
    fn new(
        store: &mut ParamStore,
        name: &str,
        spec: &ArchSpec,
        stage: usize,
        skips: usize,
        init: &mut impl Init,
    ) -> Result<Self> {
        let (d, k) = (spec.encoder_width(stage), spec.kernel);
        Ok(NestedNode {
            up: ConvBnRelu::new(store, &format!("{name}.up"), spec.encoder_width(stage + 1), d, k, init)?,
            conv1: ConvBnRelu::new(store, &format!("{name}.conv1"), (skips + 1) * d, d, k, init)?,
            conv2: ConvBnRelu::new(store, &format!("{name}.conv2"), d, d, k, init)?,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        skips: &[Var],
        below: Var,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let up = g.upsample(below, 2)?;
        let up = self.up.forward(g, store, up, mode)?;
        let mut parts = skips.to_vec();
        parts.push(up);
        let cat = g.concat(&parts)?;
        let y = self.conv1.forward(g, store, cat, mode)?;
        Ok((self.conv2.forward(g, store, y, mode)?, cat))
    }
}

#[derive(Clone, Debug)]
struct FullScaleNode {
    branches: Vec<(Branch, ConvBnRelu)>,
    fuse: ConvBnRelu,
}

#[derive(Clone, Debug)]
enum Decoder {
    /// Node `i - 1` produces `X_De^i`.
    Unet(Vec<NestedNode>),
    /// `nodes[i - 1][j - 1]` produces `X^{i,j}`; the last node of each row
    /// is `X_De^i`, the others are the intermediate `X_Me^{i,j}`.
    UnetPlusPlus(Vec<Vec<NestedNode>>),
    Unet3Plus(Vec<FullScaleNode>),
}

/// Handles into the recorded graph for one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Ungated probability maps `[B, 1, H, W]`, in `side_stages` order.
    pub sides: Vec<Var>,
    pub cls_logits: Option<Var>,
    pub cls_probs: Option<Var>,
    /// `X_En^1 .. X_En^N`.
    pub encoder: Vec<Var>,
    /// `X_De^1 .. X_De^N`.
    pub decoder: Vec<Var>,
    /// Concatenation feeding the fusion conv of decoder nodes `1 .. N-1`.
    pub fusion_inputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub spec: ArchSpec,
    pub store: ParamStore,
    encoder: Vec<(ConvBnRelu, ConvBnRelu)>,
    decoder: Decoder,
    heads: Vec<(usize, Conv2d)>,
    cgm: Option<Conv2d>,
    seed: u64,
    dropout_calls: u64,
}

impl Network {
    /// Parameters are drawn from a ChaCha8 stream seeded with `seed` in
    /// registration order: encoder, decoder, heads, classifier.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Network> {
        Self::build_from(spec, seed, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Same layout as [`Network::build`] with every weight at the midpoint
    /// of its init range. Cheap enough for counting very wide networks.
    pub fn skeleton(spec: &ArchSpec) -> Result<Network> {
        Self::build_from(spec, 0, &mut ZeroInit)
    }

    fn build_from(spec: &ArchSpec, seed: u64, init: &mut impl Init) -> Result<Network> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let (n, k) = (spec.depth, spec.kernel);

        let mut encoder = Vec::with_capacity(n);
        for i in 1..=n {
            let cin = if i == 1 { spec.input_channels } else { spec.encoder_width(i - 1) };
            let d = spec.encoder_width(i);
            encoder.push((
                ConvBnRelu::new(&mut store, &format!("enc{i}.conv1"), cin, d, k, init)?,
                ConvBnRelu::new(&mut store, &format!("enc{i}.conv2"), d, d, k, init)?,
            ));
        }

        let decoder = match spec.variant {
            Variant::Unet => {
                let mut nodes = Vec::with_capacity(n - 1);
                for i in 1..n {
                    nodes.push(NestedNode::new(&mut store, &format!("dec{i}"), spec, i, 1, init)?);
                }
                Decoder::Unet(nodes)
            }
            Variant::UnetPlusPlus => {
                let mut rows: Vec<Vec<NestedNode>> = (1..n).map(|_| Vec::new()).collect();
                for j in 1..n {
                    for i in 1..=n - j {
                        let name = if j == n - i { format!("dec{i}") } else { format!("me{i}_{j}") };
                        rows[i - 1].push(NestedNode::new(&mut store, &name, spec, i, j, init)?);
                    }
                }
                Decoder::UnetPlusPlus(rows)
            }
            Variant::Unet3Plus => {
                let s = spec.skip_channels;
                let mut nodes = Vec::with_capacity(n - 1);
                for i in 1..n {
                    let mut branches = Vec::with_capacity(n);
                    for b in Branch::full_scale(i, n) {
                        let (kk, cin) = match b {
                            Branch::Pooled { from, .. } | Branch::Direct { from } => (from, spec.encoder_width(from)),
                            Branch::Upsampled { from, .. } => (from, spec.decoder_width(from)),
                        };
                        let conv = ConvBnRelu::new(&mut store, &format!("dec{i}.branch{kk}"), cin, s, k, init)?;
                        branches.push((b, conv));
                    }
                    let w = spec.fused_width();
                    let fuse = ConvBnRelu::new(&mut store, &format!("dec{i}.fuse"), w, w, k, init)?;
                    nodes.push(FullScaleNode { branches, fuse });
                }
                Decoder::Unet3Plus(nodes)
            }
        };

        let mut heads = Vec::new();
        for i in spec.side_stages() {
            let conv =
                Conv2d::new(&mut store, &format!("side{i}"), spec.decoder_width(i), 1, k, Padding::Same, true, init)?;
            heads.push((i, conv));
        }

        let cgm = if spec.cgm {
            Some(Conv2d::new(&mut store, "cgm", spec.encoder_width(n), 2, 1, Padding::Same, true, init)?)
        } else {
            None
        };

        Ok(Network { spec: spec.clone(), store, encoder, decoder, heads, cgm, seed, dropout_calls: 0 })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Branch layout of UNet 3+ decoder node `stage`, as built.
    pub fn branches(&self, stage: usize) -> Option<Vec<Branch>> {
        match &self.decoder {
            Decoder::Unet3Plus(nodes) => {
                nodes.get(stage.checked_sub(1)?).map(|node| node.branches.iter().map(|(b, _)| *b).collect())
            }
            _ => None,
        }
    }

    pub fn side_stages(&self) -> Vec<usize> {
        self.heads.iter().map(|(i, _)| *i).collect()
    }

    /// Records a full forward pass for `x: [B, C, H, W]`.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Forward> {
        self.spec.check_input(g.shape(x))?;
        let n = self.spec.depth;
        let store = &mut self.store;

        let mut encoder = Vec::with_capacity(n);
        let mut h = x;
        for (i, (c1, c2)) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = g.maxpool(h, 2)?;
            }
            h = c1.forward(g, store, h, mode)?;
            h = c2.forward(g, store, h, mode)?;
            encoder.push(h);
        }

        // decoder[i - 1] = X_De^i; filled from the bottom up.
        let mut decoder: Vec<Option<Var>> = vec![None; n];
        decoder[n - 1] = Some(encoder[n - 1]);
        let mut fusion_inputs: Vec<Option<Var>> = vec![None; n - 1];
        match &self.decoder {
            Decoder::Unet(nodes) => {
                for i in (1..n).rev() {
                    let below = decoder[i].expect("deeper stage decoded first");
                    let (y, cat) = nodes[i - 1].forward(g, store, &[encoder[i - 1]], below, mode)?;
                    decoder[i - 1] = Some(y);
                    fusion_inputs[i - 1] = Some(cat);
                }
            }
            Decoder::UnetPlusPlus(rows) => {
                // grid[i - 1] holds X^{i,0} = X_En^i, X^{i,1}, ...
                let mut grid: Vec<Vec<Var>> = encoder.iter().map(|&e| vec![e]).collect();
                for j in 1..n {
                    for i in 1..=n - j {
                        let below = grid[i][j - 1];
                        let skips = grid[i - 1].clone();
                        let (y, cat) = rows[i - 1][j - 1].forward(g, store, &skips, below, mode)?;
                        grid[i - 1].push(y);
                        if j == n - i {
                            decoder[i - 1] = Some(y);
                            fusion_inputs[i - 1] = Some(cat);
                        }
                    }
                }
            }
            Decoder::Unet3Plus(nodes) => {
                for i in (1..n).rev() {
                    let node = &nodes[i - 1];
                    let mut parts = Vec::with_capacity(n);
                    for (branch, conv) in &node.branches {
                        let src = match *branch {
                            Branch::Pooled { from, factor } => g.maxpool(encoder[from - 1], factor)?,
                            Branch::Direct { from } => encoder[from - 1],
                            Branch::Upsampled { from, factor } => {
                                let d = decoder[from - 1].expect("deeper stage decoded first");
                                g.upsample(d, factor)?
                            }
                        };
                        parts.push(conv.forward(g, store, src, mode)?);
                    }
                    let cat = g.concat(&parts)?;
                    decoder[i - 1] = Some(node.fuse.forward(g, store, cat, mode)?);
                    fusion_inputs[i - 1] = Some(cat);
                }
            }
        }
        let decoder: Vec<Var> = decoder.into_iter().map(|d| d.expect("every stage decoded")).collect();

        let mut sides = Vec::with_capacity(self.heads.len());
        for (i, conv) in &self.heads {
            let y = conv.forward(g, store, decoder[i - 1])?;
            let y = if *i > 1 { g.upsample(y, 1 << (i - 1))? } else { y };
            sides.push(g.sigmoid(y)?);
        }

        let (cls_logits, cls_probs) = if self.cgm.is_some() {
            let (l, p) = self.cgm_forward(g, encoder[n - 1], mode)?;
            (Some(l), Some(p))
        } else {
            (None, None)
        };

        Ok(Forward {
            sides,
            cls_logits,
            cls_probs,
            encoder,
            decoder,
            fusion_inputs: fusion_inputs.into_iter().map(|v| v.expect("every node fused")).collect(),
        })
    }

    /// Classification head on the deepest encoder features: dropout (train
    /// only), 1×1 conv to two channels, global max pool. Returns the logits
    /// and their sigmoids, index 0 "without organ", index 1 "with organ".
    pub fn cgm_forward(&mut self, g: &mut Graph, deepest: Var, mode: Mode) -> Result<(Var, Var)> {
        let conv = self
            .cgm
            .as_ref()
            .ok_or_else(|| Error::Contract("classification head is disabled in this network".into()))?;
        let mut h = deepest;
        if mode == Mode::Train && self.spec.dropout_rate > 0.0 {
            self.dropout_calls += 1;
            let seed = self.seed ^ self.dropout_calls.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            h = g.dropout(h, self.spec.dropout_rate, seed)?;
        }
        let h = conv.forward(g, &self.store, h)?;
        let logits = g.global_maxpool(h)?;
        let probs = g.sigmoid(logits)?;
        Ok((logits, probs))
    }
}

/// `argmax` over `(without, with)`; an exact tie keeps the organ.
pub fn cgm_gate(probs: &[f64]) -> bool {
    probs[1] >= probs[0]
}

/// Multiplies every side output of each sample by its argmax gate.
pub fn apply_cgm_gate(sides: &[Tensor], cls_probs: &Tensor) -> Result<Vec<Tensor>> {
    let b = match cls_probs.shape() {
        &[b, 2] => b,
        s => return Err(Error::mismatch("apply_cgm_gate", s, &[0, 2])),
    };
    let gates: Vec<bool> = (0..b).map(|i| cgm_gate(&cls_probs.data()[2 * i..2 * i + 2])).collect();
    sides
        .iter()
        .map(|side| {
            if side.shape().first() != Some(&b) {
                return Err(Error::mismatch("apply_cgm_gate", side.shape(), cls_probs.shape()));
            }
            let mut out = side.clone();
            let per = side.numel() / b;
            for (chunk, &keep) in out.data_mut().chunks_mut(per).zip(&gates) {
                if !keep {
                    chunk.fill(0.0);
                }
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant) -> ArchSpec {
        ArchSpec { variant, depth: 3, base_channels: 2, skip_channels: 2, input_channels: 1, ..ArchSpec::default() }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("unet4".parse::<Variant>().is_err());
    }

    #[test]
    fn validation() {
        assert!(ArchSpec::default().validate().is_ok());
        for bad in [
            ArchSpec { depth: 1, ..ArchSpec::default() },
            ArchSpec { kernel: 4, ..ArchSpec::default() },
            ArchSpec { skip_channels: 0, ..ArchSpec::default() },
            ArchSpec { dropout_rate: 1.0, ..ArchSpec::default() },
            ArchSpec { base_channels: usize::MAX / 4, ..ArchSpec::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn full_scale_branch_layout() {
        assert_eq!(
            Branch::full_scale(2, 4),
            vec![
                Branch::Pooled { from: 1, factor: 2 },
                Branch::Direct { from: 2 },
                Branch::Upsampled { from: 3, factor: 2 },
                Branch::Upsampled { from: 4, factor: 4 },
            ]
        );
    }

    #[test]
    fn geometry_is_checked() {
        let mut net = Network::build(&small(Variant::Unet3Plus), 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 6, 8]).unwrap());
        assert!(matches!(net.forward(&mut g, x, Mode::Eval), Err(Error::InvalidGeometry { .. })));
    }

    #[test]
    fn gate_per_sample() {
        let side = Tensor::full(&[2, 1, 2, 2], 0.7).unwrap();
        let probs = Tensor::new(&[2, 2], vec![0.8, 0.2, 0.2, 0.8]).unwrap();
        let out = apply_cgm_gate(std::slice::from_ref(&side), &probs).unwrap();
        assert_eq!(&out[0].data()[..4], &[0.0; 4]);
        assert_eq!(&out[0].data()[4..], &side.data()[4..]);
        assert!(cgm_gate(&[0.5, 0.5]));
    }

    #[test]
    fn cgm_disabled_is_contract_error() {
        let mut net = Network::build(&small(Variant::Unet), 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 8, 1, 1]).unwrap());
        assert!(matches!(net.cgm_forward(&mut g, x, Mode::Eval), Err(Error::Contract(_))));
    }
}
