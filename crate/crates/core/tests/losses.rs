use unet3p_core::gradcheck::{gradcheck, DEFAULT_STEP};
use unet3p_core::losses::{bce_cls_loss, focal_loss, iou_loss, ms_ssim_loss, segmentation_loss, LossConfig, SegLoss};
use unet3p_core::{Graph, Tensor};

mod common;
use common::{binary_mask, image, ms_ssim_oracle, noisy_copy};

const TOL: f64 = 1e-4;

fn eval_loss(
    p: &Tensor,
    t: &Tensor,
    f: impl Fn(&mut Graph, unet3p_core::Var, unet3p_core::Var) -> unet3p_core::Result<unet3p_core::Var>,
) -> f64 {
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let tv = g.constant(t.clone());
    let l = f(&mut g, pv, tv).unwrap();
    g.value(l).item().unwrap()
}

#[test]
fn ms_ssim_matches_loop_oracle_on_20_pairs() {
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let target = if seed % 2 == 0 { binary_mask(64, 64, seed) } else { image(64, 64, seed) };
        let pred = if seed % 4 < 2 { noisy_copy(&target, seed + 1000, 0.3) } else { image(64, 64, seed + 500) };
        let got = eval_loss(&pred, &target, |g, p, t| ms_ssim_loss(g, p, t, &cfg));
        let want = ms_ssim_oracle(pred.data(), target.data(), 64, 64, &cfg);
        worst = worst.max((got - want).abs());
    }
    assert!(worst < 1e-6, "worst deviation {worst}");
}

#[test]
fn ms_ssim_identical_inputs() {
    let cfg = LossConfig::default();
    for seed in 0..5 {
        for t in [binary_mask(64, 64, seed), image(64, 64, seed), image(32, 48, seed)] {
            let l = eval_loss(&t, &t, |g, p, q| ms_ssim_loss(g, p, q, &cfg));
            assert!(l.abs() <= 1e-9, "{l}");
        }
    }
}

#[test]
fn ms_ssim_inverted_half_mask() {
    let cfg = LossConfig::default();
    let mask: Vec<f64> = (0..64 * 64).map(|i| if i % 64 < 32 { 0.0 } else { 1.0 }).collect();
    let inverse: Vec<f64> = mask.iter().map(|v| 1.0 - v).collect();
    let g = Tensor::new(&[1, 1, 64, 64], mask.clone()).unwrap();
    let p = Tensor::new(&[1, 1, 64, 64], inverse.clone()).unwrap();
    let oracle = ms_ssim_oracle(&inverse, &mask, 64, 64, &cfg);
    assert!(oracle > 0.9, "oracle {oracle}");
    let l = eval_loss(&p, &g, |gr, a, b| ms_ssim_loss(gr, a, b, &cfg));
    assert!(l > 0.9, "{l}");
    assert!((l - oracle).abs() < 1e-6);
}

#[test]
fn ms_ssim_symmetric_for_soft_inputs() {
    let cfg = LossConfig::default();
    for seed in 0..5 {
        let a = image(32, 32, seed);
        let b = noisy_copy(&a, seed + 7, 0.4);
        let ab = eval_loss(&a, &b, |g, p, t| ms_ssim_loss(g, p, t, &cfg));
        let ba = eval_loss(&b, &a, |g, p, t| ms_ssim_loss(g, p, t, &cfg));
        assert!((ab - ba).abs() < 1e-14);
    }
}

#[test]
fn ms_ssim_too_small_is_geometry_error() {
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let p = g.constant(image(8, 8, 1));
    assert!(matches!(ms_ssim_loss(&mut g, p, p, &cfg), Err(unet3p_core::Error::InvalidGeometry { .. })));
}

#[test]
fn patch_window_mode_is_zero_at_identity() {
    let cfg = LossConfig { window_kind: unet3p_core::losses::WindowKind::Patch, window: 8, ..LossConfig::default() };
    assert!(cfg.validate().is_err());
    let cfg = LossConfig { window: 7, ..cfg };
    let t = binary_mask(56, 56, 3);
    let l = eval_loss(&t, &t, |g, p, q| ms_ssim_loss(g, p, q, &cfg));
    assert!(l.abs() < 1e-9);
    let p = noisy_copy(&t, 4, 0.5);
    let l = eval_loss(&p, &t, |g, a, b| ms_ssim_loss(g, a, b, &cfg));
    assert!(l > 0.0 && l < 1.0);
}

#[test]
fn focal_gradcheck_on_random_logits() {
    for seed in 0..10 {
        let logits = Tensor::uniform(&[2, 1, 6, 6], seed, -3.0, 3.0).unwrap();
        let target = binary_mask(6, 6, seed + 50);
        let target =
            Tensor::stack(&[target.select(0).unwrap(), binary_mask(6, 6, seed + 51).select(0).unwrap()]).unwrap();
        let e = gradcheck(
            |g, x| {
                let p = g.sigmoid(x)?;
                let t = g.constant(target.clone());
                focal_loss(g, p, t, 2.0)
            },
            &logits,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn ms_ssim_gradcheck_32x32() {
    let cfg = LossConfig::default();
    for seed in 0..10 {
        let target = if seed % 2 == 0 { binary_mask(32, 32, seed) } else { image(32, 32, seed) };
        let pred = noisy_copy(&target, seed + 300, 0.35);
        let e = gradcheck(
            |g, x| {
                let t = g.constant(target.clone());
                ms_ssim_loss(g, x, t, &cfg)
            },
            &pred,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn iou_and_bce_gradchecks() {
    for seed in 0..10 {
        let target = binary_mask(8, 8, seed);
        let pred = image(8, 8, seed + 10);
        let e = gradcheck(
            |g, x| {
                let t = g.constant(target.clone());
                iou_loss(g, x, t)
            },
            &pred,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e < TOL, "iou seed {seed}: {e}");

        let probs = Tensor::uniform(&[3, 2], seed, 0.05, 0.95).unwrap();
        let labels = [seed % 2 == 0, true, false];
        let e = gradcheck(|g, x| bce_cls_loss(g, x, &labels), &probs, DEFAULT_STEP).unwrap();
        assert!(e < TOL, "bce seed {seed}: {e}");
    }
}

#[test]
fn hybrid_gradcheck_16x16() {
    let cfg = LossConfig::default();
    for seed in 0..10 {
        let target = binary_mask(16, 16, seed);
        let logits = Tensor::uniform(&[1, 1, 16, 16], seed + 5, -2.0, 2.0).unwrap();
        let e = gradcheck(
            |g, x| {
                let p = g.sigmoid(x)?;
                let t = g.constant(target.clone());
                Ok(segmentation_loss(g, &[p], t, &cfg)?.total)
            },
            &logits,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn hybrid_is_exact_sum_of_components() {
    let cfg = LossConfig::default();
    let target = binary_mask(32, 32, 1);
    let pred = noisy_copy(&target, 2, 0.5);
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let terms = segmentation_loss(&mut g, &[p], t, &cfg).unwrap();
    let f = g.value(terms.focal).item().unwrap();
    let s = g.value(terms.msssim.unwrap()).item().unwrap();
    let i = g.value(terms.iou.unwrap()).item().unwrap();
    assert_eq!(g.value(terms.total).item().unwrap(), f + s + i);

    let single = g.value(terms.total).item().unwrap();
    let terms4 = segmentation_loss(&mut g, &[p, p, p, p], t, &cfg).unwrap();
    assert!((g.value(terms4.total).item().unwrap() - single).abs() < 1e-15);

    let focal_cfg = LossConfig { seg_loss: SegLoss::FocalOnly, ..cfg };
    let fo = segmentation_loss(&mut g, &[p], t, &focal_cfg).unwrap();
    assert_eq!(g.value(fo.total).item().unwrap(), f);
    assert!(fo.msssim.is_none() && fo.iou.is_none());
}

#[test]
fn losses_nonnegative_and_zero_at_match() {
    let cfg = LossConfig::default();
    for seed in 0..5 {
        let target = binary_mask(32, 32, seed);
        let pred = noisy_copy(&target, seed + 9, 0.6);
        for p in [&pred, &target] {
            let f = eval_loss(p, &target, |g, a, b| focal_loss(g, a, b, 2.0));
            let i = eval_loss(p, &target, iou_loss);
            let s = eval_loss(p, &target, |g, a, b| ms_ssim_loss(g, a, b, &cfg));
            assert!(f >= 0.0 && i >= 0.0 && s >= -1e-12);
            if std::ptr::eq(p, &target) {
                assert!(f < 1e-5 && i < 1e-5 && s.abs() <= 1e-9);
            } else {
                assert!(f > 1e-5 && i > 1e-5 && s > 1e-9);
            }
        }
    }
}

#[test]
fn components_grow_as_prediction_moves_to_complement() {
    let cfg = LossConfig::default();
    for seed in 0..5 {
        let target = binary_mask(32, 32, seed);
        let mut last = [f64::NEG_INFINITY; 3];
        for step in 0..=10 {
            let a = step as f64 / 10.0;
            let data = target.data().iter().map(|&t| (1.0 - a) * t + a * (1.0 - t)).collect();
            let p = Tensor::new(target.shape(), data).unwrap();
            let now = [
                eval_loss(&p, &target, |g, x, y| focal_loss(g, x, y, 2.0)),
                eval_loss(&p, &target, |g, x, y| ms_ssim_loss(g, x, y, &cfg)),
                eval_loss(&p, &target, iou_loss),
            ];
            for c in 0..3 {
                assert!(now[c] >= last[c] - 1e-12, "component {c} fell at step {step}: {} -> {}", last[c], now[c]);
            }
            last = now;
        }
    }
}
