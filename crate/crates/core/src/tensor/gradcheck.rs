//! Central-difference gradient oracle.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a scalar loss on a fresh graph from one leaf per parameter.
/// Returns the maximum over all parameter components of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {h}")));
    }

    let mut eval = |ps: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone(), with_grad)).collect();
        let loss = f(&mut g, &vars)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::Usage("gradient check needs a scalar function".into()));
        }
        let value = g.value(loss).data()[0];
        let grads = if with_grad {
            g.backward(loss)?;
            vars.iter()
                .zip(ps)
                .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (first, analytic) = eval(params, true)?;
    let (second, _) = eval(params, false)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {first} vs {second} at identical parameters"
        )));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let (plus, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig - h;
            let (minus, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = finite_diff_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[Tensor::vector(&[3.0])],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = finite_diff_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[Tensor::vector(&[1.0, 2.0])],
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_deterministic_function_is_rejected() {
        let mut calls = 0.0;
        let res = finite_diff_check(
            |g, v| {
                calls += 1.0;
                let s = g.sum(v[0]);
                let c = g.constant(Tensor::scalar(calls));
                g.add(s, c)
            },
            &[Tensor::vector(&[1.0])],
            1e-4,
        );
        assert!(matches!(res, Err(Error::Oracle(_))));
    }

    #[test]
    fn relu_sum_gradient_matches_differences() {
        let err = finite_diff_check(
            |g, v| {
                let r = g.relu(v[0]);
                Ok(g.sum(r))
            },
            &[Tensor::vector(&[-1.0, 2.0])],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let res = finite_diff_check(|g, v| Ok(g.sum(v[0])), &[Tensor::vector(&[1.0])], 0.0);
        assert!(matches!(res, Err(Error::Usage(_))));
    }
}
