//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

fn evaluate<F>(f: &F, inputs: &[Tensor], fault: Option<OpKind>) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some(kind) = fault {
        g.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!("gradcheck function must be scalar-valued, got shape {:?}", v.shape())));
    }
    if !v.data()[0].is_finite() {
        return Err(Error::NonFinite("gradcheck function value".into()));
    }
    Ok((g, vars, out))
}

/// Worst relative error per input between the analytic gradient and a
/// central difference, using `|a - n| / max(1, |a|)`.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradcheck_with_fault(f, inputs, step, None)
}

/// As [`gradcheck_many`], but with a deliberately broken backward rule for
/// `fault` in the analytic pass.
pub fn gradcheck_with_fault<F>(f: F, inputs: &[Tensor], step: f64, fault: Option<OpKind>) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(format!("gradcheck step must be positive, got {step}")));
    }
    let (g, vars, out) = evaluate(&f, inputs, fault)?;
    let grads = g.backward(out)?;
    let mut worst = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let zeros = vec![0.0; input.numel()];
        let analytic = grads.get(vars[k]).unwrap_or(&zeros);
        let mut err: f64 = 0.0;
        let mut probe = inputs.to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = input.data()[i];
            probe[k].data_mut()[i] = x0 + step;
            let (gp, _, op) = evaluate(&f, &probe, None)?;
            probe[k].data_mut()[i] = x0 - step;
            let (gm, _, om) = evaluate(&f, &probe, None)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (gp.value(op).data()[0] - gm.value(om).data()[0]) / (2.0 * step);
            err = err.max((a - numeric).abs() / a.abs().max(1.0));
        }
        worst.push(err);
    }
    Ok(worst)
}

/// Single-input form of [`gradcheck_many`].
pub fn gradcheck<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let errs = gradcheck_many(|g, v| f(g, v[0]), std::slice::from_ref(x), step)?;
    Ok(errs[0])
}
