//! Central-difference verification of autodiff gradients.
//!
//! The checked function is supplied as a graph builder so that each probe can
//! compare branch decisions (relu signs, maxpool argmaxes) between the two
//! perturbed evaluations. A probe that crosses a kink lands on a different
//! smooth piece of the function; such coordinates are flagged and excluded
//! from the error instead of producing a meaningless difference quotient.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over the checked, non-kink coordinates.
    pub max_rel_error: f64,
    /// Coordinates whose probes straddled a nondifferentiable point.
    pub kinks: Vec<usize>,
    /// Number of coordinates that entered the error (kinks excluded).
    pub checked: usize,
}

/// Relative error with the guarded denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Check the autodiff gradient of a scalar-valued `build` at `x` against
/// central finite differences over every coordinate of `x`.
pub fn finite_difference_check<F>(build: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_coords(build, x, eps, &coords)
}

/// Same as [`finite_difference_check`] but probing only the given coordinates.
pub fn finite_difference_check_coords<F>(
    build: F,
    x: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("finite differences need eps > 0".into()));
    }
    let mut base = x.clone();
    base.set_requires_grad(true);

    let mut g = Graph::new();
    let leaf = g.leaf(&base);
    let loss = build(&mut g, leaf)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Contract(
            "finite_difference_check requires a scalar-valued function".into(),
        ));
    }
    g.backward(loss)?;
    let autodiff: Vec<f64> = match g.grad(leaf) {
        Some(gr) => gr.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |data: &[f64]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let leaf = g
            .leaf_from(x.shape().to_vec(), data.to_vec(), false)
            .expect("leaf shape");
        let loss = build(&mut g, leaf)?;
        Ok((g.scalar(loss)?, g.decision_fingerprint()))
    };

    let mut probe = x.data().to_vec();
    let mut max_rel = 0.0f64;
    let mut kinks = Vec::new();
    let mut checked = 0usize;
    for &i in coords {
        if i >= probe.len() {
            return Err(Error::Index(format!(
                "gradient-check coordinate {i} out of range for {} elements",
                probe.len()
            )));
        }
        let orig = probe[i];
        probe[i] = orig + eps;
        let (f_plus, fp_plus) = eval(&probe)?;
        probe[i] = orig - eps;
        let (f_minus, fp_minus) = eval(&probe)?;
        probe[i] = orig;

        if fp_plus != fp_minus {
            kinks.push(i);
            continue;
        }
        let fd = (f_plus - f_minus) / (2.0 * eps);
        max_rel = max_rel.max(relative_error(autodiff[i], fd));
        checked += 1;
    }

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        kinks,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5]);
        let report =
            finite_difference_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
        assert!(report.kinks.is_empty());
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
    }

    #[test]
    fn quadratic_gradient_matches() {
        let x = Tensor::from_vec(vec![1.0, -0.5, 0.25]);
        let report = finite_difference_check(
            |g, x| {
                let zero = g.leaf(&Tensor::zeros(vec![3]));
                g.squared_l2_distance(x, zero)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.kinks.is_empty());
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn hinge_at_zero_is_flagged_not_checked() {
        // relu kink sits exactly at 0 in the first coordinate
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        let report = finite_difference_check(
            |g, x| {
                let r = g.relu(x);
                Ok(g.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.kinks, vec![0]);
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn relu_away_from_kink_passes() {
        let x = Tensor::from_vec(vec![-0.7, 0.9, 2.0]);
        let report = finite_difference_check(
            |g, x| {
                let r = g.relu(x);
                Ok(g.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.kinks.is_empty());
        assert!(report.max_rel_error < 1e-8);
    }
}
