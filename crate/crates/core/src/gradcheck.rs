//! Central-difference gradient checking against the tape's backward pass.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Default perturbation for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Compare an analytic gradient against central differences of `f` at `p`,
/// elementwise, and return the largest relative error
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_diff_check<T, F>(f: F, p: &Tensor<T>, analytic: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    let indices: Vec<usize> = (0..p.numel()).collect();
    finite_diff_check_at(f, p, analytic, eps, &indices)
}

/// Same as [`finite_diff_check`] but only at the given coordinates; large
/// parameter tensors are spot-checked this way.
pub fn finite_diff_check_at<T, F>(
    f: F,
    p: &Tensor<T>,
    analytic: &Tensor<T>,
    eps: f64,
    indices: &[usize],
) -> Result<f64>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if p.shape() != analytic.shape() {
        return Err(Error::Dimension(
            "analytic gradient shape differs from parameter shape".into(),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Config("finite-difference eps must be positive".into()));
    }
    let mut max_rel = 0.0f64;
    let mut data = p.data().to_vec();
    for &i in indices {
        let orig = data[i];
        data[i] = orig + T::from_f64(eps);
        let plus = eval_finite(&f, p.shape(), &data)?;
        data[i] = orig - T::from_f64(eps);
        let minus = eval_finite(&f, p.shape(), &data)?;
        data[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i].to_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn eval_finite<T, F>(f: &F, shape: &[usize], data: &[T]) -> Result<f64>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    let t = Tensor::new(shape.to_vec(), data.to_vec())?;
    let v = f(&t)?.to_f64();
    if !v.is_finite() {
        return Err(Error::Evaluation("objective returned a non-finite value".into()));
    }
    Ok(v)
}
