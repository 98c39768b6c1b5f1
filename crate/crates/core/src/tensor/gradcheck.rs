//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, TensorError};

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max ‖analytic − numeric‖ / max(1e-12, ‖numeric‖)` over parameters,
    /// with Euclidean norms taken per parameter tensor. A norm ratio is used
    /// rather than an element-wise one because individual gradient entries
    /// can be legitimately tiny (e.g. directions a softmax is nearly
    /// invariant to), where a scalar quotient measures only round-off.
    pub max_rel_err: f64,
    /// Parameter where the maximum occurred, and the flat index of its
    /// largest absolute disagreement (for diagnostics).
    pub worst_param: String,
    pub worst_index: usize,
}

/// Compares tape gradients of a scalar-valued function against central
/// finite differences.
///
/// `f` must evaluate the function using only the tensors it is given (it must
/// not register leaves itself); the harness binds the named parameters for the
/// analytic pass and re-evaluates `f` with perturbed untracked copies for the
/// numeric pass. Non-finite losses or gradients are reported as errors naming
/// the parameter involved.
pub fn finite_difference_check<F>(
    f: F,
    params: &[(&str, Tensor)],
    step: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, TensorError>,
{
    if step <= 0.0 {
        return Err(TensorError::Invalid {
            op: "finite_difference_check",
            what: "step must be positive".into(),
        });
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let bound: Vec<Tensor> = params.iter().map(|(_, t)| tape.leaf(t)).collect();
    let loss = f(&mut tape, &bound)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            got: loss.shape().to_vec(),
        });
    }
    if !loss.item().is_finite() {
        return Err(TensorError::Invalid {
            op: "finite_difference_check",
            what: format!("loss is non-finite at the base point: {}", loss.item()),
        });
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = bound
        .iter()
        .map(|t| {
            tape.grad_of(t)
                .expect("leaf is tracked")
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    for ((name, _), grads) in params.iter().zip(&analytic) {
        if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
            return Err(TensorError::Invalid {
                op: "finite_difference_check",
                what: format!("analytic gradient of {name}[{idx}] is non-finite"),
            });
        }
    }

    // Numeric pass: central differences, one element at a time.
    let eval = |tensors: &[Tensor], ctx: &str| -> Result<f64, TensorError> {
        let mut scratch = Tape::new();
        let loss = f(&mut scratch, tensors)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(TensorError::Invalid {
                op: "finite_difference_check",
                what: format!("loss is non-finite while perturbing {ctx}"),
            });
        }
        Ok(v)
    };

    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: params.first().map(|(n, _)| n.to_string()).unwrap_or_default(),
        worst_index: 0,
    };
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let mut err_sq = 0.0;
        let mut numeric_sq = 0.0;
        let mut worst_abs = (0.0f64, 0usize);
        for j in 0..tensor.numel() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            let mut d_plus = tensor.data().to_vec();
            let mut d_minus = tensor.data().to_vec();
            d_plus[j] += step;
            d_minus[j] -= step;
            plus[pi] = Tensor::from_vec(tensor.shape().to_vec(), d_plus)?;
            minus[pi] = Tensor::from_vec(tensor.shape().to_vec(), d_minus)?;
            let ctx = format!("{name}[{j}]");
            let numeric = (eval(&plus, &ctx)? - eval(&minus, &ctx)?) / (2.0 * step);
            let abs = (analytic[pi][j] - numeric).abs();
            err_sq += abs * abs;
            numeric_sq += numeric * numeric;
            if abs > worst_abs.0 {
                worst_abs = (abs, j);
            }
        }
        let rel = err_sq.sqrt() / numeric_sq.sqrt().max(1e-12);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = name.to_string();
            report.worst_index = worst_abs.1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn composite_affine_relu_gradient_checks_out() {
        let x = Tensor::from_vec(vec![2, 3], vec![0.4, -1.2, 0.9, 1.5, 0.3, -0.7]).unwrap();
        let w = Tensor::from_vec(vec![2, 3], vec![0.2, -0.5, 1.1, 0.7, 0.4, -0.3]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![0.1, -0.2]).unwrap();
        let report = finite_difference_check(
            |tape, p| {
                let h = ops::affine_rows(tape, &p[0], &p[1], &p[2])?;
                let r = ops::relu(tape, &h);
                let sq = ops::mul(tape, &r, &r)?;
                Ok(ops::sum_all(tape, &sq))
            },
            &[("x", x), ("w", w), ("b", b)],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn checker_flags_a_kink_at_the_base_point() {
        // relu is not differentiable at 0: analytic says 0, central
        // differences say 0.5, and the checker must notice.
        let x = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let report = finite_difference_check(
            |tape, p| {
                let r = ops::relu(tape, &p[0]);
                Ok(ops::sum_all(tape, &r))
            },
            &[("x", x)],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.4, "kink not detected: {}", report.max_rel_err);
    }

    #[test]
    fn non_finite_loss_is_an_error_naming_the_parameter() {
        let x = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let err = finite_difference_check(
            |tape, p| {
                // Blows up as soon as the input moves off the base point.
                let v = p[0].data()[0];
                if (v - 1.0).abs() > 1e-7 {
                    Ok(Tensor::scalar(f64::NAN))
                } else {
                    Ok(ops::sum_all(tape, &p[0]))
                }
            },
            &[("x", x)],
            1e-5,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("x[0]"), "message should name the parameter: {msg}");
    }
}
