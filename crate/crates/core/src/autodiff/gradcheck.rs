//! Central-difference gradient oracle.

use super::graph::{Graph, Var};
use crate::error::{MetroError, Result};
use crate::tensor::Tensor;

/// Worst-case disagreement between analytic and central-difference gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }

    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
        }
    }

    /// Folds one analytic/numeric pair into the report. Relative error uses
    /// `max(|a|, |n|, floor)` as denominator so near-zero entries are judged absolutely.
    pub fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.max_abs_err = self.max_abs_err.max(abs);
        self.max_rel_err = self.max_rel_err.max(rel);
        self.checked += 1;
    }
}

/// Denominator floor for relative errors.
pub const REL_FLOOR: f64 = 1e-5;

/// Checks `d f / d x` for a scalar-valued tensor function.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), step)
}

/// Checks the gradient of `f` with respect to every input tensor.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(MetroError::Validation("grad_check step must be positive".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(MetroError::Validation(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad_data(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let o = f(&mut g, &vs)?;
        Ok(g.value(o).data()[0])
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for e in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[e];
            work[ti].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            report.record(grads[e], (plus - minus) / (2.0 * step), REL_FLOOR);
        }
    }
    Ok(report)
}
