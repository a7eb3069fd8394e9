//! SGD training, Dice evaluation and the CGM-gated prediction path.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{apply_cgm_gate, cgm_gate, Network};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{bce_cls_loss, segmentation_loss, LossConfig};
use crate::nn::{Mode, ParamStore};
use crate::tensor::Tensor;

pub const DICE_THRESHOLD: f64 = 0.5;

/// Samples per forward pass during evaluation. Eval-mode batch norm is
/// per-sample, so this only bounds memory.
pub const EVAL_BATCH: usize = 8;

/// `2|P∩G| / (|P| + |G|)` after binarizing `pred` at `p > threshold`.
/// Two empty masks agree perfectly and score 1.
pub fn dice(pred: &[f64], mask: &[f64], threshold: f64) -> f64 {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(mask) {
        let (a, b) = (a > threshold, b > 0.5);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Pixels predicted as organ where the mask has none.
pub fn false_positives(pred: &[f64], mask: &[f64], threshold: f64) -> usize {
    pred.iter().zip(mask).filter(|&(&a, &b)| a > threshold && b <= 0.5).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub cls_loss_weight: f64,
    /// Stop once eval-mode mean Dice on the training set reaches this.
    pub stop_at_dice: Option<f64>,
    /// Stop once eval-mode classifier accuracy on the training set reaches
    /// this. Combined with `stop_at_dice` both must hold.
    pub stop_at_cls_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 200,
            batch_size: 4,
            seed: 1,
            cls_loss_weight: 1.0,
            stop_at_dice: None,
            stop_at_cls_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size {} must be >= 2 for batch norm", self.batch_size)));
        }
        if !(self.cls_loss_weight >= 0.0 && self.cls_loss_weight.is_finite()) {
            return Err(Error::Config(format!("cls_loss_weight {} must be finite and >= 0", self.cls_loss_weight)));
        }
        Ok(())
    }
}

/// SGD with classic momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd { learning_rate, momentum, velocity: Vec::new() }
    }

    /// Applies and clears the gradient of every trainable parameter. A
    /// parameter without a gradient means a branch of the network is not
    /// connected to the loss.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, e)) = store.params().find(|(_, e)| e.tensor.grad().is_none()) {
            return Err(Error::Contract(format!("parameter {} has no gradient", e.name)));
        }
        if self.velocity.len() < store.entries().len() {
            self.velocity.resize(store.entries().len(), None);
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let grad = e.tensor.take_grad().expect("checked above");
            let v = self.velocity[i].get_or_insert_with(|| vec![0.0; grad.len()]);
            for ((p, vi), gi) in e.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vi = mu * *vi + gi;
                *p -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Per-epoch means over batches.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub focal: f64,
    pub msssim: Option<f64>,
    pub iou: Option<f64>,
    pub bce: Option<f64>,
    /// Mean Dice of the finest side output on the training forward passes.
    pub dice: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "epoch {} loss {:.6} focal {:.6} msssim {} iou {} bce {} dice {:.6}",
            self.epoch,
            self.loss,
            self.focal,
            opt(self.msssim),
            opt(self.iou),
            opt(self.bce),
            self.dice
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// The evaluation that satisfied the stopping targets, if any did.
    pub stopped_by: Option<EvalResult>,
}

impl TrainReport {
    pub fn log_text(&self) -> String {
        self.epochs.iter().map(|e| format!("{e}\n")).collect()
    }
}

fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    // A trailing single sample cannot be batch-normalized on its own.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

fn locate(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (epoch {epoch}, batch {batch})")),
        other => other,
    }
}

fn finite(g: &Graph, v: Var, name: &str, epoch: usize, batch: usize) -> Result<f64> {
    let x = g.value(v).item()?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("{name} loss is {x} at epoch {epoch}, batch {batch}")))
    }
}

/// Mean over samples of the Dice of `pred` against `mask`, both `[B, 1, H, W]`.
fn batch_dice(pred: &Tensor, mask: &Tensor) -> Vec<f64> {
    let b = pred.shape()[0];
    let per = pred.numel() / b;
    pred.data().chunks(per).zip(mask.data().chunks(per)).map(|(p, m)| dice(p, m, DICE_THRESHOLD)).collect()
}

/// Runs SGD over `data`, calling `on_epoch` after every epoch.
pub fn train(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport { epochs: Vec::new(), stopped_by: None };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let (mut has_ssim, mut has_bce) = (false, false);
        let mut dices = Vec::with_capacity(data.len());
        let groups = batches(&order, cfg.batch_size);
        for (bi, idx) in groups.iter().enumerate() {
            let batch = bi + 1;
            let (x, y, flags) = data.batch(idx)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let yv = g.constant(y.clone());
            let out = net.forward(&mut g, xv, Mode::Train).map_err(|e| locate(e, epoch, batch))?;
            let terms = segmentation_loss(&mut g, &out.sides, yv, loss_cfg).map_err(|e| locate(e, epoch, batch))?;
            let mut total = terms.total;
            let mut bce = None;
            if let Some(probs) = out.cls_probs {
                let b = bce_cls_loss(&mut g, probs, &flags).map_err(|e| locate(e, epoch, batch))?;
                let wb = g.mul_scalar(b, cfg.cls_loss_weight)?;
                total = g.add(total, wb)?;
                bce = Some(b);
            }

            sums[0] += finite(&g, total, "total", epoch, batch)?;
            sums[1] += finite(&g, terms.focal, "focal", epoch, batch)?;
            if let (Some(s), Some(i)) = (terms.msssim, terms.iou) {
                sums[2] += finite(&g, s, "msssim", epoch, batch)?;
                sums[3] += finite(&g, i, "iou", epoch, batch)?;
                has_ssim = true;
            }
            if let Some(b) = bce {
                sums[4] += finite(&g, b, "bce", epoch, batch)?;
                has_bce = true;
            }
            dices.extend(batch_dice(g.value(out.sides[0]), &y));

            let mut grads = g.backward(total).map_err(|e| locate(e, epoch, batch))?;
            net.store.absorb_grads(&g, &mut grads)?;
            sgd.step(&mut net.store)?;
        }

        let nb = groups.len() as f64;
        let log = EpochLog {
            epoch,
            loss: sums[0] / nb,
            focal: sums[1] / nb,
            msssim: has_ssim.then(|| sums[2] / nb),
            iou: has_ssim.then(|| sums[3] / nb),
            bce: has_bce.then(|| sums[4] / nb),
            dice: dices.iter().sum::<f64>() / dices.len() as f64,
        };
        log::info!("{log}");
        on_epoch(&log);
        let proxy_dice = log.dice;
        report.epochs.push(log);

        if cfg.stop_at_dice.is_none() && cfg.stop_at_cls_accuracy.is_none() {
            continue;
        }
        if cfg.stop_at_dice.is_some_and(|t| proxy_dice < t) {
            continue;
        }
        let eval = evaluate(net, data, false)?;
        let dice_ok = cfg.stop_at_dice.is_none_or(|t| eval.mean_dice >= t);
        let cls_ok = cfg.stop_at_cls_accuracy.is_none_or(|t| eval.cls_accuracy.is_some_and(|a| a >= t));
        if dice_ok && cls_ok {
            log::info!("stopping after epoch {epoch}: eval dice {:.6}", eval.mean_dice);
            report.stopped_by = Some(eval);
            break;
        }
    }
    Ok(report)
}

/// Eval-mode outputs for one batch of images.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Finest side output, `[B, 1, H, W]`, before gating.
    pub probs: Tensor,
    /// `probs` multiplied by the classifier gate, when the network has one.
    pub gated: Option<Tensor>,
    pub cls_probs: Option<Tensor>,
}

impl Prediction {
    /// The map used for metrics: gated when requested and available.
    pub fn output(&self, use_gate: bool) -> &Tensor {
        match (&self.gated, use_gate) {
            (Some(g), true) => g,
            _ => &self.probs,
        }
    }
}

pub fn predict(net: &mut Network, images: Tensor) -> Result<Prediction> {
    let mut g = Graph::new();
    let x = g.constant(images);
    let out = net.forward(&mut g, x, Mode::Eval)?;
    let probs = g.value(out.sides[0]).clone();
    let cls_probs = out.cls_probs.map(|p| g.value(p).clone());
    let gated = match &cls_probs {
        Some(c) => Some(apply_cgm_gate(std::slice::from_ref(&probs), c)?.remove(0)),
        None => None,
    };
    Ok(Prediction { probs, gated, cls_probs })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// Per-sample Dice of the (optionally gated) finest side output.
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    pub has_organ: Vec<bool>,
    /// False-positive pixels summed over samples without an organ.
    pub fp_ungated: usize,
    /// Same count after gating; equals `fp_ungated` without a classifier.
    pub fp_gated: usize,
    pub cls_accuracy: Option<f64>,
    pub gated: bool,
}

impl EvalResult {
    /// Mean Dice restricted to samples with (`true`) or without an organ.
    pub fn mean_dice_where(&self, organ: bool) -> Option<f64> {
        let v: Vec<f64> =
            self.dice.iter().zip(&self.has_organ).filter(|&(_, &o)| o == organ).map(|(&d, _)| d).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples {}", self.dice.len())?;
        writeln!(f, "gated {}", self.gated)?;
        writeln!(f, "mean_dice {:.6}", self.mean_dice)?;
        if let Some(d) = self.mean_dice_where(true) {
            writeln!(f, "mean_dice_organ {d:.6}")?;
        }
        if let Some(d) = self.mean_dice_where(false) {
            writeln!(f, "mean_dice_non_organ {d:.6}")?;
        }
        writeln!(f, "fp_pixels_ungated {}", self.fp_ungated)?;
        writeln!(f, "fp_pixels_gated {}", self.fp_gated)?;
        if let Some(a) = self.cls_accuracy {
            writeln!(f, "cls_accuracy {a:.6}")?;
        }
        Ok(())
    }
}

/// Eval-mode Dice over `data`. The final prediction is the finest side
/// output, gated by the classifier when `use_gate` is set and the network
/// has one.
pub fn evaluate(net: &mut Network, data: &Dataset, use_gate: bool) -> Result<EvalResult> {
    let mut res = EvalResult {
        dice: Vec::with_capacity(data.len()),
        mean_dice: 0.0,
        has_organ: Vec::with_capacity(data.len()),
        fp_ungated: 0,
        fp_gated: 0,
        cls_accuracy: None,
        gated: use_gate && net.spec.cgm,
    };
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let (x, y, flags) = data.batch(idx)?;
        let pred = predict(net, x)?;
        let per = y.numel() / idx.len();
        let out = pred.output(use_gate);
        res.dice.extend(batch_dice(out, &y));
        for (s, &organ) in flags.iter().enumerate() {
            let range = s * per..(s + 1) * per;
            let m = &y.data()[range.clone()];
            if !organ {
                res.fp_ungated += false_positives(&pred.probs.data()[range.clone()], m, DICE_THRESHOLD);
                let gated = pred.gated.as_ref().unwrap_or(&pred.probs);
                res.fp_gated += false_positives(&gated.data()[range], m, DICE_THRESHOLD);
            }
            if let Some(c) = &pred.cls_probs {
                correct += (cgm_gate(&c.data()[2 * s..2 * s + 2]) == organ) as usize;
            }
        }
        res.has_organ.extend(flags);
    }
    res.mean_dice = res.dice.iter().sum::<f64>() / res.dice.len().max(1) as f64;
    if net.spec.cgm {
        res.cls_accuracy = Some(correct as f64 / data.len().max(1) as f64);
    }
    Ok(res)
}
