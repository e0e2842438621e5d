//! Central-difference gradient checking against the reverse-mode tape.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Result of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst element-wise relative error for each input.
    pub max_rel_err: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub tol: f64,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tol
    }
}

/// Relative error of one element. The denominator is floored at a thousandth
/// of the largest numeric gradient over all inputs, so entries whose true
/// gradient is zero (a bias that cancels inside a softmax, say) do not turn
/// round-off into a large ratio.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-12);
    (analytic - numeric).abs() / denom
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok(g.value(out).item())
}

/// Checks `f`'s reverse-mode gradient w.r.t. every input tensor against
/// `(f(x+h) - f(x-h)) / 2h`, element by element.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("grad_check step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).expect("param leaf has a gradient"))
        .collect();

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_err = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig;
            num.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        numeric.push(num);
    }
    let scale = numeric
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, n) in analytic.iter().zip(&numeric) {
        let worst = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(&a, &n)| relative_error(a, n, scale))
            .fold(0.0, f64::max);
        max_rel_err.push(worst);
    }
    Ok(GradReport {
        max_rel_err,
        analytic,
        numeric,
        tol,
    })
}
