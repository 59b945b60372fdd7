//! Central finite-difference gradient checking.

use super::{tol, Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self) -> bool {
        self.max_rel_err < tol::GRAD_REL_ERR
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(tol::GRAD_REL_FLOOR)
}

/// Checks `d f / d inputs` where `f` builds a scalar from leaves that track
/// gradients. Every entry of every input is perturbed by `±step`.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheck { max_rel_err: 0.0, checked: 0, worst: None };
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for j in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[j];
            work[k].data_mut()[j] = x0 + step;
            let fp = eval(&work)?;
            work[k].data_mut()[j] = x0 - step;
            let fm = eval(&work)?;
            work[k].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            let e = rel_err(analytic[j], numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((k, j, analytic[j], numeric));
            }
        }
    }
    Ok(report)
}
