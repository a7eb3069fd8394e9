//! The finite-difference suite behind `unet3p gradcheck`: every graph op,
//! every loss, and one end-to-end pass through a tiny UNet 3+.

use std::fmt::Write as _;

use crate::arch::{ArchSpec, Network, Variant};
use crate::error::Result;
use crate::gradcheck::{gradcheck_with_fault, DEFAULT_STEP};
use crate::graph::{Graph, NormStats, OpKind, Var};
use crate::losses::{bce_cls_loss, focal_loss, iou_loss, ms_ssim_loss, segmentation_loss, LossConfig};
use crate::nn::{Mode, BN_EPS};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    /// Worst relative error over all seeds and inputs.
    pub worst: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub checks: Vec<Check>,
    pub seeds: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "{:<18} worst {:.3e} {}", c.name, c.worst, if c.passed() { "pass" } else { "FAIL" });
        }
        let _ = writeln!(
            out,
            "{} checks, {} seeds each, tolerance {TOLERANCE:e}: {}",
            self.checks.len(),
            self.seeds,
            if self.passed() { "all pass" } else { "FAILED" }
        );
        out
    }
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;
/// Name, function under test and input generator for one check.
type Case = (&'static str, OpFn, fn(u64) -> Vec<Tensor>);

fn rand(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape, seed, lo, hi).expect("valid shape")
}

fn mask(shape: &[usize], seed: u64) -> Tensor {
    let t = rand(shape, seed, 0.0, 1.0);
    let data = t.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Contracts a tensor output with fixed weights so every element carries
/// its own adjoint. The weights are the last input and stay constant.
fn weighted(g: &mut Graph, y: Var, w: Var) -> Result<Var> {
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Tensor-valued ops; the last input holds the contraction weights.
fn op_checks() -> Vec<Case> {
    vec![
        (
            "add",
            |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted(g, y, v[2])
            },
            |s| vec![rand(&[6], s, -1.0, 1.0), rand(&[6], s + 1, -1.0, 1.0), rand(&[6], s + 2, -1.0, 1.0)],
        ),
        (
            "sub",
            |g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted(g, y, v[2])
            },
            |s| vec![rand(&[6], s, -1.0, 1.0), rand(&[1], s + 1, -1.0, 1.0), rand(&[6], s + 2, -1.0, 1.0)],
        ),
        (
            "mul",
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted(g, y, v[2])
            },
            |s| vec![rand(&[6], s, -1.0, 1.0), rand(&[6], s + 1, -1.0, 1.0), rand(&[6], s + 2, -1.0, 1.0)],
        ),
        (
            "div",
            |g, v| {
                let y = g.div(v[0], v[1])?;
                weighted(g, y, v[2])
            },
            |s| vec![rand(&[6], s, -1.0, 1.0), rand(&[6], s + 1, 0.5, 2.0), rand(&[6], s + 2, -1.0, 1.0)],
        ),
        (
            "add_scalar",
            |g, v| {
                let y = g.add_scalar(v[0], 0.7)?;
                weighted(g, y, v[1])
            },
            |s| vec![rand(&[6], s, -1.0, 1.0), rand(&[6], s + 2, -1.0, 1.0)],
        ),
        (
            "mul_scalar",
            |g, v| {
                let y = g.mul_scalar(v[0], -1.3)?;
                weighted(g, y, v[1])
            },
            |s| vec![rand(&[6], s, -1.0, 1.0), rand(&[6], s + 2, -1.0, 1.0)],
        ),
        (
            "pow",
            |g, v| {
                let y = g.pow(v[0], 1.7)?;
                weighted(g, y, v[1])
            },
            |s| vec![rand(&[6], s, 0.2, 2.0), rand(&[6], s + 2, -1.0, 1.0)],
        ),
        (
            "log",
            |g, v| {
                let y = g.log(v[0])?;
                weighted(g, y, v[1])
            },
            |s| vec![rand(&[6], s, 0.2, 2.0), rand(&[6], s + 2, -1.0, 1.0)],
        ),
        (
            "clamp",
            |g, v| {
                let y = g.clamp(v[0], -0.5, 0.5)?;
                weighted(g, y, v[1])
            },
            |s| vec![rand(&[6], s, -1.0, 1.0), rand(&[6], s + 2, -1.0, 1.0)],
        ),
        (
            "relu",
            |g, v| {
                let y = g.relu(v[0])?;
                weighted(g, y, v[1])
            },
            |s| vec![rand(&[6], s, -1.0, 1.0), rand(&[6], s + 2, -1.0, 1.0)],
        ),
        (
            "sigmoid",
            |g, v| {
                let y = g.sigmoid(v[0])?;
                weighted(g, y, v[1])
            },
            |s| vec![rand(&[6], s, -3.0, 3.0), rand(&[6], s + 2, -1.0, 1.0)],
        ),
        (
            "reshape",
            |g, v| {
                let y = g.reshape(v[0], &[3, 2])?;
                weighted(g, y, v[1])
            },
            |s| vec![rand(&[6], s, -1.0, 1.0), rand(&[3, 2], s + 2, -1.0, 1.0)],
        ),
        (
            "matmul",
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted(g, y, v[2])
            },
            |s| vec![rand(&[3, 4], s, -1.0, 1.0), rand(&[4, 2], s + 1, -1.0, 1.0), rand(&[3, 2], s + 2, -1.0, 1.0)],
        ),
        (
            "conv2d",
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                weighted(g, y, v[3])
            },
            |s| {
                vec![
                    rand(&[2, 3, 5, 5], s, -1.0, 1.0),
                    rand(&[4, 3, 3, 3], s + 1, -1.0, 1.0),
                    rand(&[4], s + 2, -1.0, 1.0),
                    rand(&[2, 4, 5, 5], s + 3, -1.0, 1.0),
                ]
            },
        ),
        (
            "maxpool",
            |g, v| {
                let y = g.maxpool(v[0], 2)?;
                weighted(g, y, v[1])
            },
            |s| vec![rand(&[2, 3, 4, 4], s, -1.0, 1.0), rand(&[2, 3, 2, 2], s + 2, -1.0, 1.0)],
        ),
        (
            "avgpool",
            |g, v| {
                let y = g.avgpool(v[0], 2)?;
                weighted(g, y, v[1])
            },
            |s| vec![rand(&[2, 3, 4, 4], s, -1.0, 1.0), rand(&[2, 3, 2, 2], s + 2, -1.0, 1.0)],
        ),
        (
            "bilinear_upsample",
            |g, v| {
                let y = g.upsample(v[0], 4)?;
                weighted(g, y, v[1])
            },
            |s| vec![rand(&[2, 2, 3, 3], s, -1.0, 1.0), rand(&[2, 2, 12, 12], s + 2, -1.0, 1.0)],
        ),
        (
            "concat_channels",
            |g, v| {
                let y = g.concat(&[v[0], v[1]])?;
                weighted(g, y, v[2])
            },
            |s| {
                vec![
                    rand(&[2, 3, 4, 4], s, -1.0, 1.0),
                    rand(&[2, 2, 4, 4], s + 1, -1.0, 1.0),
                    rand(&[2, 5, 4, 4], s + 2, -1.0, 1.0),
                ]
            },
        ),
        (
            "batchnorm",
            |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], NormStats::Batch { eps: BN_EPS })?;
                weighted(g, y, v[3])
            },
            |s| {
                vec![
                    rand(&[2, 3, 4, 4], s, -1.0, 1.0),
                    rand(&[3], s + 1, 0.5, 1.5),
                    rand(&[3], s + 2, -1.0, 1.0),
                    rand(&[2, 3, 4, 4], s + 3, -1.0, 1.0),
                ]
            },
        ),
        (
            "dropout",
            |g, v| {
                let y = g.dropout(v[0], 0.5, 17)?;
                weighted(g, y, v[1])
            },
            |s| vec![rand(&[2, 3, 4, 4], s, -1.0, 1.0), rand(&[2, 3, 4, 4], s + 2, -1.0, 1.0)],
        ),
        (
            "global_maxpool",
            |g, v| {
                let y = g.global_maxpool(v[0])?;
                weighted(g, y, v[1])
            },
            |s| vec![rand(&[2, 3, 4, 4], s, -1.0, 1.0), rand(&[2, 3], s + 2, -1.0, 1.0)],
        ),
    ]
}

/// Scalar-valued functions, checked on every input.
fn scalar_checks() -> Vec<Case> {
    vec![
        (
            "sum",
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.sum(y)
            },
            |s| vec![rand(&[6], s, -1.0, 1.0)],
        ),
        (
            "mean",
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.mean(y)
            },
            |s| vec![rand(&[6], s, -1.0, 1.0)],
        ),
        (
            "focal",
            |g, v| focal_loss(g, v[0], v[1], 2.0),
            |s| vec![rand(&[2, 1, 8, 8], s, 0.05, 0.95), mask(&[2, 1, 8, 8], s + 1)],
        ),
        (
            "ms_ssim",
            |g, v| ms_ssim_loss(g, v[0], v[1], &LossConfig::default()),
            |s| vec![rand(&[1, 1, 32, 32], s, 0.05, 0.95), mask(&[1, 1, 32, 32], s + 1)],
        ),
        (
            "iou",
            |g, v| iou_loss(g, v[0], v[1]),
            |s| vec![rand(&[2, 1, 8, 8], s, 0.05, 0.95), mask(&[2, 1, 8, 8], s + 1)],
        ),
        (
            "hybrid",
            |g, v| Ok(segmentation_loss(g, &[v[0]], v[1], &LossConfig::default())?.total),
            |s| vec![rand(&[1, 1, 16, 16], s, 0.05, 0.95), mask(&[1, 1, 16, 16], s + 1)],
        ),
        ("bce_cls", |g, v| bce_cls_loss(g, v[0], &[true, false, true]), |s| vec![rand(&[3, 2], s, 0.05, 0.95)]),
    ]
}

/// Hybrid loss of a depth-2 UNet 3+ with deep supervision, differentiated
/// with respect to every trainable parameter.
fn end_to_end(seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let spec = ArchSpec {
        variant: Variant::Unet3Plus,
        depth: 2,
        base_channels: 1,
        skip_channels: 1,
        input_channels: 1,
        deep_supervision: true,
        cgm: false,
        ..ArchSpec::default()
    };
    let cfg = LossConfig { window: 3, msssim_scales: 2, ..LossConfig::default() };
    let x = rand(&[2, 1, 8, 8], seed, 0.0, 1.0);
    let y = mask(&[2, 1, 8, 8], seed + 1);
    let mut net = Network::build(&spec, seed)?;

    let loss = |net: &mut Network, fault: Option<OpKind>| -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        if let Some(k) = fault {
            g.inject_fault(k);
        }
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let out = net.forward(&mut g, xv, Mode::Train)?;
        let l = segmentation_loss(&mut g, &out.sides, yv, &cfg)?.total;
        Ok((g, l))
    };

    let (g, l) = loss(&mut net, fault)?;
    let mut grads = g.backward(l)?;
    net.store.zero_grads();
    net.store.absorb_grads(&g, &mut grads)?;
    let ids: Vec<_> = net.store.params().map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = net.store.get(id).grad().map(<[f64]>::to_vec).unwrap_or_default();
        for i in 0..net.store.get(id).numel() {
            let x0 = net.store.get(id).data()[i];
            net.store.get_mut(id).data_mut()[i] = x0 + DEFAULT_STEP;
            let (gp, lp) = loss(&mut net, None)?;
            net.store.get_mut(id).data_mut()[i] = x0 - DEFAULT_STEP;
            let (gm, lm) = loss(&mut net, None)?;
            net.store.get_mut(id).data_mut()[i] = x0;
            let numeric = (gp.value(lp).item()? - gm.value(lm).item()?) / (2.0 * DEFAULT_STEP);
            let a = analytic.get(i).copied().unwrap_or(0.0);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Runs every check over `seeds` seeds. With `fault`, the backward rule of
/// that op is deliberately wrong in the analytic pass.
pub fn run_suite(seeds: usize, fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for (name, f, make) in op_checks() {
        let mut worst: f64 = 0.0;
        for s in 0..seeds as u64 {
            let mut inputs = make(1000 * s + 1);
            let w = inputs.pop().expect("weights input");
            let errs = gradcheck_with_fault(
                |g, v| {
                    let mut all = v.to_vec();
                    all.push(g.constant(w.clone()));
                    f(g, &all)
                },
                &inputs,
                DEFAULT_STEP,
                fault,
            )?;
            worst = errs.into_iter().fold(worst, f64::max);
        }
        checks.push(Check { name, worst });
    }
    for (name, f, make) in scalar_checks() {
        let mut worst: f64 = 0.0;
        for s in 0..seeds as u64 {
            let errs = gradcheck_with_fault(f, &make(1000 * s + 1), DEFAULT_STEP, fault)?;
            worst = errs.into_iter().fold(worst, f64::max);
        }
        checks.push(Check { name, worst });
    }
    let mut worst: f64 = 0.0;
    for s in 0..seeds as u64 {
        worst = worst.max(end_to_end(s + 1, fault)?);
    }
    checks.push(Check { name: "unet3p_end_to_end", worst });
    Ok(SuiteReport { checks, seeds })
}
