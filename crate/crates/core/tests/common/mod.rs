//! Reference implementations shared by the integration suites.

use unet3p_core::losses::{LossConfig, MSSSIM_FACTOR_FLOOR};
use unet3p_core::Tensor;

/// Explicit-loop MS-SSIM loss of one `h × w` image pair: weighted window
/// sums at every valid position, deviations taken about the local mean,
/// 2×2 block means between scales.
pub fn ms_ssim_oracle(p: &[f64], g: &[f64], h: usize, w: usize, cfg: &LossConfig) -> f64 {
    let k = cfg.window;
    let win = cfg.window_tensor();
    let win = win.data();
    let mut scales = 1;
    let (mut hh, mut ww) = (h, w);
    while scales < cfg.msssim_scales && hh % 2 == 0 && ww % 2 == 0 && hh / 2 >= k && ww / 2 >= k {
        hh /= 2;
        ww /= 2;
        scales += 1;
    }
    let total: f64 = cfg.msssim_weights[..scales].iter().sum();
    let (mut p, mut g, mut h, mut w) = (p.to_vec(), g.to_vec(), h, w);
    let mut product = 1.0;
    for m in 0..scales {
        if m > 0 {
            let half = |x: &[f64]| {
                let mut out = vec![0.0; (h / 2) * (w / 2)];
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        out[i * (w / 2) + j] = (x[2 * i * w + 2 * j]
                            + x[2 * i * w + 2 * j + 1]
                            + x[(2 * i + 1) * w + 2 * j]
                            + x[(2 * i + 1) * w + 2 * j + 1])
                            / 4.0;
                    }
                }
                out
            };
            p = half(&p);
            g = half(&g);
            h /= 2;
            w /= 2;
        }
        let (mut lum_sum, mut cs_sum, mut count) = (0.0, 0.0, 0.0);
        for i in 0..=h - k {
            for j in 0..=w - k {
                let (mut mp, mut mg) = (0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        let wt = win[a * k + b];
                        mp += wt * p[(i + a) * w + j + b];
                        mg += wt * g[(i + a) * w + j + b];
                    }
                }
                let (mut vp, mut vg, mut cov) = (0.0, 0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        let wt = win[a * k + b];
                        let dp = p[(i + a) * w + j + b] - mp;
                        let dg = g[(i + a) * w + j + b] - mg;
                        vp += wt * dp * dp;
                        vg += wt * dg * dg;
                        cov += wt * dp * dg;
                    }
                }
                lum_sum += (2.0 * mp * mg + cfg.c1) / (mp * mp + mg * mg + cfg.c1);
                cs_sum += (2.0 * cov + cfg.c2) / (vp + vg + cfg.c2);
                count += 1.0;
            }
        }
        let beta = cfg.msssim_weights[m] / total;
        let lum = (lum_sum / count).max(MSSSIM_FACTOR_FLOOR);
        let cs = (cs_sum / count).max(MSSSIM_FACTOR_FLOOR);
        product *= lum.powf(beta) * cs.powf(beta);
    }
    1.0 - product
}

pub fn image(h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[1, 1, h, w], seed, 0.0, 1.0).unwrap()
}

/// A prediction correlated with `target`: blend with noise, in [0, 1].
pub fn noisy_copy(target: &Tensor, seed: u64, mix: f64) -> Tensor {
    let noise = Tensor::uniform(target.shape(), seed, 0.0, 1.0).unwrap();
    let data = target.data().iter().zip(noise.data()).map(|(t, n)| (1.0 - mix) * t + mix * n).collect();
    Tensor::new(target.shape(), data).unwrap()
}

pub fn binary_mask(h: usize, w: usize, seed: u64) -> Tensor {
    let u = image(h, w, seed);
    let data = u.data().iter().map(|&v| if v > 0.6 { 1.0 } else { 0.0 }).collect();
    Tensor::new(u.shape(), data).unwrap()
}
