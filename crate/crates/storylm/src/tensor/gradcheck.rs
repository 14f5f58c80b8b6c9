//! Finite-difference gradient verification.

use super::{Graph, NodeId, Tensor, TensorError};

/// Outcome of a gradient check: the worst relative error seen and every
/// coordinate that exceeded the tolerance.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub n_checked: usize,
    /// `(coordinate, analytic, numeric)` for each failing coordinate.
    pub failures: Vec<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error between an analytic and a numeric derivative. Both being
/// tiny counts as agreement: finite differences cannot resolve anything
/// below the cancellation floor.
fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares two gradient vectors coordinate by coordinate.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_rel_error: f64 = 0.0;
    let mut failures = Vec::new();
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_error(a, n);
        max_rel_error = max_rel_error.max(e);
        if e >= tolerance {
            failures.push((i, a, n));
        }
    }
    GradCheckReport {
        max_rel_error,
        tolerance,
        n_checked: analytic.len(),
        failures,
    }
}

/// Checks the analytic gradient of a scalar-valued tensor function against
/// central finite differences `(f(x+h·e_i) − f(x−h·e_i)) / 2h`.
///
/// `f` receives a fresh graph and the leaf holding the point, and must return
/// a scalar loss node built from recorded primitives.
pub fn grad_check<F>(
    f: F,
    point: &Tensor,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>,
{
    let eval = |data: &[f64]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(point.shape().to_vec(), data.to_vec())?.with_requires_grad(false),
        );
        let loss = f(&mut g, x)?;
        if g.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: g.value(loss).shape().to_vec(),
            });
        }
        Ok(g.value(loss).item())
    };

    // Analytic gradient at the point.
    let mut g = Graph::new();
    let x = g.leaf(point.clone().with_requires_grad(true));
    let loss = f(&mut g, x)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get_or_zeros(x, point.shape());

    // Central differences, one coordinate at a time.
    let mut numeric = Vec::with_capacity(point.len());
    let mut data = point.data().to_vec();
    for i in 0..data.len() {
        let saved = data[i];
        data[i] = saved + h;
        let up = eval(&data)?;
        data[i] = saved - h;
        let down = eval(&data)?;
        data[i] = saved;
        numeric.push((up - down) / (2.0 * h));
    }

    Ok(compare_gradients(analytic.data(), &numeric, tolerance))
}
