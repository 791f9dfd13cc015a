use super::{AutodiffError, Graph, NodeId};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Max over checked coordinates of
    /// `|analytic − central| / (|analytic| + |central| + 1e−12)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbed evaluation left the domain
    /// of some op (e.g. `sqrt` at 0) or the analytic gradient was infinite.
    pub domain_boundary: Vec<usize>,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Central-difference check of `∂root/∂leaf` at the current leaf bindings.
///
/// The graph is re-evaluated `2·len(leaf)` times and restored afterwards.
pub fn finite_difference_check(
    graph: &mut Graph,
    root: NodeId,
    leaf: NodeId,
    step: f64,
) -> Result<FdReport, AutodiffError> {
    if !(step > 0.0) {
        return Err(AutodiffError::InvalidArgument("finite-difference step must be > 0"));
    }
    let grads = graph.backward(root, &[leaf])?;
    let analytic = grads.get(leaf).expect("requested leaf").to_vec();
    let original = graph.value(leaf).clone();
    let shape = original.shape().to_vec();

    let eval_at = |graph: &mut Graph, i: usize, delta: f64| -> Result<Option<f64>, AutodiffError> {
        let mut data = original.to_vec();
        data[i] += delta;
        graph.set_leaf(leaf, super::Array::new(shape.clone(), data)?)?;
        match graph.evaluate(root) {
            Ok(v) => Ok(Some(v.item())),
            Err(AutodiffError::NonFinite { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        domain_boundary: Vec::new(),
    };
    for (i, &a) in analytic.iter().enumerate() {
        let plus = eval_at(graph, i, step)?;
        let minus = eval_at(graph, i, -step)?;
        match (plus, minus) {
            (Some(p), Some(m)) if a.is_finite() => {
                let central = (p - m) / (2.0 * step);
                let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
                report.max_rel_error = report.max_rel_error.max(rel);
                report.checked += 1;
            }
            _ => report.domain_boundary.push(i),
        }
    }
    graph.set_leaf(leaf, original)?;
    graph.evaluate(root)?;
    Ok(report)
}
