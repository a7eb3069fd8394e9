//! Segmentation and classification losses, all expressed as graph ops so
//! they differentiate with everything else.
//!
//! Reductions run over the whole `[B, 1, H, W]` tensor: focal is a mean over
//! every pixel of the batch, IoU sums over the batch, and the MS-SSIM
//! factors are averaged over every window position of every sample.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;
/// Smoothing term in the IoU denominator.
pub const IOU_EPS: f64 = 1e-7;
/// Per-scale MS-SSIM weights of Wang, Simoncelli and Bovik (2003).
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Lower bound applied to the spatially averaged MS-SSIM factors before
/// exponentiation; the contrast-structure mean can go negative and a
/// fractional power of it is undefined.
pub const MSSSIM_FACTOR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegLoss {
    /// focal + MS-SSIM + IoU
    Hybrid,
    FocalOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    /// Gaussian weights, sliding with stride 1.
    Gaussian,
    /// Uniform weights over non-overlapping tiles (stride = window).
    Patch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub seg_loss: SegLoss,
    pub focal_gamma: f64,
    pub msssim_scales: usize,
    pub msssim_weights: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
    pub window: usize,
    pub window_kind: WindowKind,
    pub sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            seg_loss: SegLoss::Hybrid,
            focal_gamma: 2.0,
            msssim_scales: 5,
            msssim_weights: MSSSIM_WEIGHTS.to_vec(),
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            window: 11,
            window_kind: WindowKind::Gaussian,
            sigma: 1.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.focal_gamma.is_nan() || self.focal_gamma < 0.0 {
            return bad(format!("focal_gamma must be >= 0, got {}", self.focal_gamma));
        }
        if self.msssim_scales == 0 {
            return bad("msssim_scales must be >= 1".into());
        }
        if self.msssim_weights.len() < self.msssim_scales {
            return bad(format!("{} msssim weights for {} scales", self.msssim_weights.len(), self.msssim_scales));
        }
        if self.msssim_weights.iter().any(|&w| w.is_nan() || w <= 0.0) {
            return bad("msssim weights must be positive".into());
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return bad("C1 and C2 must be positive".into());
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return bad(format!("msssim window must be odd, got {}", self.window));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return bad("msssim sigma must be positive".into());
        }
        Ok(())
    }

    /// Number of scales usable on an `h × w` image: every scale must be at
    /// least one window across, and each factor-2 reduction needs even
    /// dimensions.
    pub fn feasible_scales(&self, h: usize, w: usize) -> Result<usize> {
        if h.min(w) < self.window {
            return Err(Error::geometry("ms_ssim", format!("{h}x{w} image smaller than the {} window", self.window)));
        }
        let (mut h, mut w, mut m) = (h, w, 1);
        while m < self.msssim_scales && h % 2 == 0 && w % 2 == 0 && (h / 2).min(w / 2) >= self.window {
            h /= 2;
            w /= 2;
            m += 1;
        }
        Ok(m)
    }

    /// The first `scales` weights renormalized to sum to one.
    pub fn scale_weights(&self, scales: usize) -> Vec<f64> {
        let w = &self.msssim_weights[..scales];
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }

    /// Normalized `window × window` filter, shaped `[1, 1, k, k]`.
    pub fn window_tensor(&self) -> Tensor {
        let k = self.window;
        let data = match self.window_kind {
            WindowKind::Patch => vec![1.0 / (k * k) as f64; k * k],
            WindowKind::Gaussian => {
                let c = (k / 2) as f64;
                let g1: Vec<f64> =
                    (0..k).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp()).collect();
                let s: f64 = g1.iter().sum();
                let g1: Vec<f64> = g1.iter().map(|v| v / s).collect();
                (0..k * k).map(|i| g1[i / k] * g1[i % k]).collect()
            }
        };
        Tensor::new(&[1, 1, k, k], data).expect("window shape")
    }

    fn window_stride(&self) -> usize {
        match self.window_kind {
            WindowKind::Gaussian => 1,
            WindowKind::Patch => self.window,
        }
    }
}

fn check_pair(g: &Graph, pred: Var, target: Var, op: &'static str) -> Result<()> {
    let (p, t) = (g.shape(pred), g.shape(target));
    if p != t {
        return Err(Error::mismatch(op, p, t));
    }
    Ok(())
}

/// Mean over pixels of `-(1 - p_t)^γ · ln p_t`, where `p_t` is the
/// probability assigned to the true class. No class weighting.
pub fn focal_loss(g: &mut Graph, pred: Var, target: Var, gamma: f64) -> Result<Var> {
    check_pair(g, pred, target, "focal_loss")?;
    let p = g.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)?;
    // p_t = (1 - t) + p · (2t - 1)
    let two_t = g.mul_scalar(target, 2.0)?;
    let sign = g.add_scalar(two_t, -1.0)?;
    let signed = g.mul(p, sign)?;
    let base = g.rsub_scalar(1.0, target)?;
    let pt = g.add(signed, base)?;
    let log_pt = g.log(pt)?;
    let miss = g.rsub_scalar(1.0, pt)?;
    let modulation = g.pow(miss, gamma)?;
    let term = g.mul(modulation, log_pt)?;
    let mean = g.mean(term)?;
    g.mul_scalar(mean, -1.0)
}

/// `1 − Σ(p·g) / (Σp + Σg − Σ(p·g) + ε)`.
pub fn iou_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    check_pair(g, pred, target, "iou_loss")?;
    let prod = g.mul(pred, target)?;
    let inter = g.sum(prod)?;
    let sp = g.sum(pred)?;
    let st = g.sum(target)?;
    let both = g.add(sp, st)?;
    let union = g.sub(both, inter)?;
    let union = g.add_scalar(union, IOU_EPS)?;
    let ratio = g.div(inter, union)?;
    g.rsub_scalar(1.0, ratio)
}

/// Spatial means of the luminance and contrast-structure maps at one scale.
fn ssim_factors(g: &mut Graph, p: Var, t: Var, window: Var, stride: usize, cfg: &LossConfig) -> Result<(Var, Var)> {
    let mu_p = g.conv2d(p, window, None, stride, 0)?;
    let mu_t = g.conv2d(t, window, None, stride, 0)?;
    let pp = g.mul(p, p)?;
    let tt = g.mul(t, t)?;
    let pt = g.mul(p, t)?;
    let e_pp = g.conv2d(pp, window, None, stride, 0)?;
    let e_tt = g.conv2d(tt, window, None, stride, 0)?;
    let e_pt = g.conv2d(pt, window, None, stride, 0)?;

    let mu_pp = g.mul(mu_p, mu_p)?;
    let mu_tt = g.mul(mu_t, mu_t)?;
    let mu_pt = g.mul(mu_p, mu_t)?;
    let var_p = g.sub(e_pp, mu_pp)?;
    let var_t = g.sub(e_tt, mu_tt)?;
    let cov = g.sub(e_pt, mu_pt)?;

    // l = (2 μp μg + C1) / (μp² + μg² + C1)
    let num = g.mul_scalar(mu_pt, 2.0)?;
    let num = g.add_scalar(num, cfg.c1)?;
    let den = g.add(mu_pp, mu_tt)?;
    let den = g.add_scalar(den, cfg.c1)?;
    let lum = g.div(num, den)?;

    // cs = (2 σpg + C2) / (σp² + σg² + C2)
    let num = g.mul_scalar(cov, 2.0)?;
    let num = g.add_scalar(num, cfg.c2)?;
    let den = g.add(var_p, var_t)?;
    let den = g.add_scalar(den, cfg.c2)?;
    let cs = g.div(num, den)?;

    Ok((g.mean(lum)?, g.mean(cs)?))
}

/// `1 − Π_m l_m^{β_m} · cs_m^{γ_m}` with `β_m = γ_m` and factor-2 average
/// pooling between scales.
pub fn ms_ssim_loss(g: &mut Graph, pred: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    check_pair(g, pred, target, "ms_ssim_loss")?;
    let shape = g.shape(pred).to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidShape { shape, reason: "ms_ssim_loss expects [B, C, H, W]".into() });
    }
    let scales = cfg.feasible_scales(shape[2], shape[3])?;
    if scales < cfg.msssim_scales {
        log::info!(
            "ms-ssim: {}x{} input supports {scales} of {} scales; weights renormalized",
            shape[2],
            shape[3],
            cfg.msssim_scales
        );
    }
    let weights = cfg.scale_weights(scales);
    let window = g.constant(cfg.window_tensor());
    let (mut p, mut t) = (pred, target);
    let mut product: Option<Var> = None;
    for (m, &w) in weights.iter().enumerate() {
        if m > 0 {
            p = g.avgpool(p, 2)?;
            t = g.avgpool(t, 2)?;
        }
        let (lum, cs) = ssim_factors(g, p, t, window, cfg.window_stride(), cfg)?;
        let lum = g.clamp(lum, MSSSIM_FACTOR_FLOOR, f64::INFINITY)?;
        let cs = g.clamp(cs, MSSSIM_FACTOR_FLOOR, f64::INFINITY)?;
        let lum = g.pow(lum, w)?;
        let cs = g.pow(cs, w)?;
        let term = g.mul(lum, cs)?;
        product = Some(match product {
            Some(acc) => g.mul(acc, term)?,
            None => term,
        });
    }
    let product = product.expect("at least one scale");
    g.rsub_scalar(1.0, product)
}

/// Mean binary cross-entropy of `[B, 2]` class probabilities against the
/// one-hot `(without, with)` target.
pub fn bce_cls_loss(g: &mut Graph, probs: Var, has_organ: &[bool]) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape != [has_organ.len(), 2] {
        return Err(Error::mismatch("bce_cls_loss", &shape, &[has_organ.len(), 2]));
    }
    let onehot: Vec<f64> = has_organ.iter().flat_map(|&y| if y { [0.0, 1.0] } else { [1.0, 0.0] }).collect();
    let target = g.constant(Tensor::new(&shape, onehot)?);
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = g.log(p)?;
    let q = g.rsub_scalar(1.0, p)?;
    let log_q = g.log(q)?;
    let pos = g.mul(target, log_p)?;
    let not_t = g.rsub_scalar(1.0, target)?;
    let neg = g.mul(not_t, log_q)?;
    let ll = g.add(pos, neg)?;
    let mean = g.mean(ll)?;
    g.mul_scalar(mean, -1.0)
}

/// Per-component loss nodes, each already averaged over side outputs.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub focal: Var,
    pub msssim: Option<Var>,
    pub iou: Option<Var>,
}

fn mean_of(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    g.mul_scalar(acc, 1.0 / vars.len() as f64)
}

/// Per side output `focal + ms_ssim + iou` (or focal alone), averaged over
/// the side outputs with equal weight.
pub fn segmentation_loss(g: &mut Graph, sides: &[Var], target: Var, cfg: &LossConfig) -> Result<LossTerms> {
    if sides.is_empty() {
        return Err(Error::Contract("segmentation loss needs at least one side output".into()));
    }
    let (mut seg, mut focal, mut ssim, mut iou) = (vec![], vec![], vec![], vec![]);
    for &side in sides {
        let f = focal_loss(g, side, target, cfg.focal_gamma)?;
        focal.push(f);
        match cfg.seg_loss {
            SegLoss::FocalOnly => seg.push(f),
            SegLoss::Hybrid => {
                let s = ms_ssim_loss(g, side, target, cfg)?;
                let i = iou_loss(g, side, target)?;
                let fs = g.add(f, s)?;
                seg.push(g.add(fs, i)?);
                ssim.push(s);
                iou.push(i);
            }
        }
    }
    Ok(LossTerms {
        total: mean_of(g, &seg)?,
        focal: mean_of(g, &focal)?,
        msssim: if ssim.is_empty() { None } else { Some(mean_of(g, &ssim)?) },
        iou: if iou.is_empty() { None } else { Some(mean_of(g, &iou)?) },
    })
}
