//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParameterSet};
use crate::parallel::{self, Execution};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - central| / (|analytic| + |central| + 1e-12)`.
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn loss_value<F>(loss_fn: &F, params: &ParameterSet) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let mut graph = Graph::new();
    let root = loss_fn(&mut graph, params)?;
    let v = graph.value(root);
    if !v.is_scalar() {
        return Err(Error::NotScalar { shape: v.shape().to_vec() });
    }
    Ok(v.item())
}

/// Compares the analytic gradient of `loss_fn` with central differences at
/// every parameter coordinate.
pub fn finite_difference_report<F>(loss_fn: F, params: &ParameterSet, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var> + Sync + Send,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::InvalidArgument(format!("finite-difference step {step} outside (0, 1e-3]")));
    }
    let mut graph = Graph::new();
    let root = loss_fn(&mut graph, params)?;
    let analytic = graph.backward(root, params)?;

    let coords: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |k| (id, k)))
        .collect();
    let errors = parallel::map(Execution::default(), &coords, |&(id, k)| -> Result<f64> {
        let mut shifted = params.clone();
        let base = shifted.value(id).data()[k];
        shifted.value_mut(id).data_mut()[k] = base + step;
        let plus = loss_value(&loss_fn, &shifted)?;
        shifted.value_mut(id).data_mut()[k] = base - step;
        let minus = loss_value(&loss_fn, &shifted)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference" });
        }
        let central = (plus - minus) / (2.0 * step);
        let a = analytic.get(id).data()[k];
        Ok((a - central).abs() / (a.abs() + central.abs() + 1e-12))
    });

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: coords.len(),
    };
    for (&(id, k), err) in coords.iter().zip(errors) {
        let err = err?;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            if err >= report.max_relative_error {
                report.worst = Some((params.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

/// Maximum relative error between analytic and central-difference gradients.
pub fn finite_difference_check<F>(loss_fn: F, params: &ParameterSet, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var> + Sync + Send,
{
    finite_difference_report(loss_fn, params, step).map(|r| r.max_relative_error)
}
