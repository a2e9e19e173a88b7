//! Central finite-difference verification of graph gradients.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Result of comparing analytic and finite-difference gradients.
///
/// The error for one parameter is `max|analytic - numeric|` divided by the
/// larger of the two gradients' peak magnitudes, so entries whose gradient is
/// negligible relative to the rest of the tensor do not dominate.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Relative discrepancy between two gradients of the same shape.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn finite_difference(
    x: &Tensor,
    step: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * step);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Checks the graph built by `build` against central differences for every
/// parameter tensor in `params`.
///
/// `build` receives the node ids of `params` in order and returns the scalar
/// root. It is called once with trainable leaves and then repeatedly with
/// constant leaves for the finite-difference probes.
pub fn grad_check<F>(params: &[Tensor], step: f64, tolerance: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::Invalid(format!("grad_check step must be positive, got {step}")));
    }
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| graph.param(p.clone())).collect();
    let root = build(&mut graph, &ids)?;
    let grads = graph.backward(root)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|p| g.constant(p.clone())).collect();
        let root = build(&mut g, &ids)?;
        g.value(root)
            .item()
            .ok_or_else(|| Error::NonScalarRoot(g.value(root).shape().to_vec()))
    };

    let mut per_param = Vec::with_capacity(params.len());
    let mut working = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("parameter gradient");
        let numeric = finite_difference(&params[pi], step, |probe| {
            working[pi] = probe.clone();
            eval(&working)
        })?;
        working[pi] = params[pi].clone();
        per_param.push(relative_error(analytic, &numeric));
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        tolerance,
    })
}
