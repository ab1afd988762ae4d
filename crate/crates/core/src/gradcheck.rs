//! Central finite-difference checks for taped computations (64-bit).

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
}

/// Relative error with a small absolute floor so that near-zero partials do
/// not dominate the report.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Builds `f(inputs)` on a fresh graph, back-propagates, and compares each
/// input's gradient against central differences with step `h`.
///
/// `inputs_with_grad[i] == false` marks an input as a constant (e.g. a gate
/// pattern) that is neither differentiated nor perturbed.
pub fn check<F>(f: F, inputs: &[Tensor<f64>], inputs_with_grad: &[bool], h: f64) -> Result<Vec<Option<GradCheck>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs
            .iter()
            .zip(inputs_with_grad)
            .map(|(x, &rg)| g.leaf(x.clone(), rg))
            .collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(inputs_with_grad)
        .map(|(x, &rg)| g.leaf(x.clone(), rg))
        .collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = Vec::with_capacity(inputs.len());
    for (idx, (&var, &rg)) in vars.iter().zip(inputs_with_grad).enumerate() {
        if !rg {
            report.push(None);
            continue;
        }
        let analytic = g
            .grad(var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[idx].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut xs = inputs.to_vec();
        for e in 0..inputs[idx].numel() {
            let orig = inputs[idx].data()[e];
            xs[idx].data_mut()[e] = orig + h;
            let plus = eval(&xs)?;
            xs[idx].data_mut()[e] = orig - h;
            let minus = eval(&xs)?;
            xs[idx].data_mut()[e] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        let max_rel_err = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0, f64::max);
        report.push(Some(GradCheck {
            analytic,
            numeric,
            max_rel_err,
        }));
    }
    Ok(report)
}

/// Largest relative error over every checked input.
pub fn worst(report: &[Option<GradCheck>]) -> f64 {
    report
        .iter()
        .flatten()
        .map(|c| c.max_rel_err)
        .fold(0.0, f64::max)
}
