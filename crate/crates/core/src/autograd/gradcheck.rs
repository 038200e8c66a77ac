//! Central finite differences, used as an oracle for [`super::Tape::backward`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `params`:
/// `(f(p + eps) - f(p - eps)) / (2 eps)` per coordinate.
pub fn finite_diff_gradient<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut grad = Tensor::zeros(params[t].shape());
        for i in 0..params[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = f(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let minus = f(&work)?;
            work[t].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Largest coordinate-wise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(
            |p| Ok(p[0].data()[0].powi(2)),
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn zero_function_has_zero_gradient() {
        let p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = finite_diff_gradient(|_| Ok(0.0), &[p], 1e-5).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        assert!(finite_diff_gradient(|_| Ok(0.0), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
