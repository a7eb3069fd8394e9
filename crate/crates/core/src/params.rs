//! Closed-form parameter accounting, checked against the built network.
//!
//! Every row splits its count into the convolution-weight product the
//! per-stage decoder formulas describe (`weights`) and the terms those
//! formulas leave out (`extra`: batch-norm scale/shift, head biases). The
//! `enumerated` column sums the actual tensors registered under the row's
//! name prefix.

use std::fmt::Write as _;

use crate::arch::{ArchSpec, Network, Variant};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Decoder,
    /// UNet++ nodes `X_Me^{i,k}` between the encoder and `X_De^i`.
    Intermediate,
    Head,
    Classifier,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
            Group::Intermediate => "intermediate",
            Group::Head => "head",
            Group::Classifier => "classifier",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Row {
    /// Parameter-name prefix, e.g. `dec3` or `me1_2`.
    pub label: String,
    pub group: Group,
    pub stage: usize,
    pub weights: usize,
    pub extra: usize,
    pub enumerated_weights: usize,
    pub enumerated: usize,
}

impl Row {
    pub fn symbolic(&self) -> usize {
        self.weights + self.extra
    }

    pub fn consistent(&self) -> bool {
        self.weights == self.enumerated_weights && self.symbolic() == self.enumerated
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub spec: ArchSpec,
    pub rows: Vec<Row>,
    /// Every trainable scalar of the built network.
    pub enumerated_total: usize,
}

impl ParamReport {
    pub fn symbolic_total(&self) -> usize {
        self.rows.iter().map(Row::symbolic).sum()
    }

    pub fn group_total(&self, groups: &[Group]) -> usize {
        self.rows.iter().filter(|r| groups.contains(&r.group)).map(Row::symbolic).sum()
    }

    /// Decoder nodes including UNet++ intermediates, without heads.
    pub fn decoder_total(&self) -> usize {
        self.group_total(&[Group::Decoder, Group::Intermediate])
    }

    /// The `X_De^i` node row of decoder stage `stage`.
    pub fn decoder_stage(&self, stage: usize) -> Option<&Row> {
        self.rows.iter().find(|r| r.group == Group::Decoder && r.stage == stage)
    }

    /// Symbolic and enumerated totals agree, row by row and overall.
    pub fn consistent(&self) -> bool {
        self.rows.iter().all(Row::consistent) && self.symbolic_total() == self.enumerated_total
    }

    pub fn first_inconsistency(&self) -> Option<String> {
        if let Some(r) = self.rows.iter().find(|r| !r.consistent()) {
            return Some(format!(
                "{}: symbolic {} (weights {}) vs enumerated {} (weights {})",
                r.label,
                r.symbolic(),
                r.weights,
                r.enumerated,
                r.enumerated_weights
            ));
        }
        (self.symbolic_total() != self.enumerated_total)
            .then(|| format!("total: symbolic {} vs enumerated {}", self.symbolic_total(), self.enumerated_total))
    }
}

/// Encoder stage `i`: two `D_F × D_F` convs, each followed by batch norm.
fn encoder_row(spec: &ArchSpec, i: usize) -> (usize, usize) {
    let k2 = spec.kernel * spec.kernel;
    let cin = if i == 1 { spec.input_channels } else { spec.encoder_width(i - 1) };
    let d = spec.encoder_width(i);
    (k2 * (cin * d + d * d), 4 * d)
}

/// UNet decoder stage, and UNet++ node `X^{i,j}` with `j` same-level
/// predecessors: up-conv `d(X_De^{i+1}) → d`, fusion `(j + 1)·d → d`, then
/// `d → d`. UNet is the `j = 1` case.
fn nested_row(spec: &ArchSpec, i: usize, j: usize) -> (usize, usize) {
    let k2 = spec.kernel * spec.kernel;
    let d = spec.encoder_width(i);
    let below = spec.encoder_width(i + 1);
    (k2 * (below * d + d * d + (j + 1) * d * d), 6 * d)
}

/// UNet 3+ decoder stage: one branch conv to `skip` channels per scale and
/// a `skip·N → skip·N` fusion conv.
fn full_scale_row(spec: &ArchSpec, i: usize) -> (usize, usize) {
    let (n, s) = (spec.depth, spec.skip_channels);
    let k2 = spec.kernel * spec.kernel;
    let encoders: usize = (1..=i).map(|k| spec.encoder_width(k)).sum();
    let decoders: usize = (i + 1..=n).map(|k| spec.decoder_width(k)).sum();
    let fused = spec.fused_width();
    (k2 * ((encoders + decoders) * s + fused * fused), 2 * n * s + 2 * fused)
}

fn head_row(spec: &ArchSpec, i: usize) -> (usize, usize) {
    (spec.kernel * spec.kernel * spec.decoder_width(i), 1)
}

fn classifier_row(spec: &ArchSpec) -> (usize, usize) {
    (2 * spec.encoder_width(spec.depth), 2)
}

fn row(net: &Network, label: String, group: Group, stage: usize, (weights, extra): (usize, usize)) -> Row {
    let prefix = format!("{label}.");
    let enumerated_weights = net
        .store
        .params()
        .filter(|(_, e)| e.name.starts_with(&prefix) && e.name.ends_with(".weight"))
        .map(|(_, e)| e.tensor.numel())
        .sum();
    Row { enumerated: net.store.count_prefix(&prefix), label, group, stage, weights, extra, enumerated_weights }
}

/// Evaluates the closed forms for `spec` and enumerates a network of the
/// same spec.
pub fn param_report(spec: &ArchSpec) -> Result<ParamReport> {
    let net = Network::skeleton(spec)?;
    let n = spec.depth;
    let mut rows = Vec::new();
    for i in 1..=n {
        rows.push(row(&net, format!("enc{i}"), Group::Encoder, i, encoder_row(spec, i)));
    }
    for i in 1..n {
        match spec.variant {
            Variant::Unet => rows.push(row(&net, format!("dec{i}"), Group::Decoder, i, nested_row(spec, i, 1))),
            Variant::UnetPlusPlus => {
                for j in 1..n - i {
                    rows.push(row(&net, format!("me{i}_{j}"), Group::Intermediate, i, nested_row(spec, i, j)));
                }
                rows.push(row(&net, format!("dec{i}"), Group::Decoder, i, nested_row(spec, i, n - i)));
            }
            Variant::Unet3Plus => rows.push(row(&net, format!("dec{i}"), Group::Decoder, i, full_scale_row(spec, i))),
        }
    }
    for i in spec.side_stages() {
        rows.push(row(&net, format!("side{i}"), Group::Head, i, head_row(spec, i)));
    }
    if spec.cgm {
        rows.push(row(&net, "cgm".into(), Group::Classifier, n, classifier_row(spec)));
    }
    Ok(ParamReport { spec: spec.clone(), rows, enumerated_total: net.store.count() })
}

/// One report per variant, all other spec fields shared.
pub fn compare_variants(spec: &ArchSpec) -> Result<Vec<ParamReport>> {
    Variant::ALL.into_iter().map(|variant| param_report(&ArchSpec { variant, ..spec.clone() })).collect()
}

/// Aligned plain-text table, one block per report.
pub fn render_table(reports: &[ParamReport]) -> String {
    let mut out = String::new();
    for rep in reports {
        let _ = writeln!(out, "variant {}", rep.spec.variant);
        let _ = writeln!(
            out,
            "  {:<10} {:<12} {:>14} {:>10} {:>14} {:>14}",
            "node", "group", "weights", "extra", "symbolic", "enumerated"
        );
        for r in &rep.rows {
            let _ = writeln!(
                out,
                "  {:<10} {:<12} {:>14} {:>10} {:>14} {:>14}{}",
                r.label,
                r.group.name(),
                r.weights,
                r.extra,
                r.symbolic(),
                r.enumerated,
                if r.consistent() { "" } else { "  MISMATCH" }
            );
        }
        let _ = writeln!(
            out,
            "  {:<10} {:<12} {:>14} {:>10} {:>14} {:>14}",
            "decoder",
            "",
            "",
            "",
            rep.decoder_total(),
            ""
        );
        let _ = writeln!(
            out,
            "  {:<10} {:<12} {:>14} {:>10} {:>14} {:>14}",
            "total",
            "",
            "",
            "",
            rep.symbolic_total(),
            rep.enumerated_total
        );
    }
    out
}

/// `variant.row.field=value` lines.
pub fn render_key_values(reports: &[ParamReport]) -> String {
    let mut out = String::new();
    for rep in reports {
        let v = rep.spec.variant;
        for r in &rep.rows {
            let _ = writeln!(out, "{v}.{}.weights={}", r.label, r.weights);
            let _ = writeln!(out, "{v}.{}.symbolic={}", r.label, r.symbolic());
            let _ = writeln!(out, "{v}.{}.enumerated={}", r.label, r.enumerated);
        }
        let _ = writeln!(out, "{v}.decoder_total={}", rep.decoder_total());
        let _ = writeln!(out, "{v}.symbolic_total={}", rep.symbolic_total());
        let _ = writeln!(out, "{v}.enumerated_total={}", rep.enumerated_total);
        let _ = writeln!(out, "{v}.consistent={}", rep.consistent());
    }
    out
}
