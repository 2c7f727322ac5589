//! Forecast error metrics.

use crate::{Error, Real, Result, Tensor};

fn check<T: Real>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op,
            lhs: pred.shape().into(),
            rhs: target.shape().into(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Contract(alloc::format!("{op} of empty tensors")));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check("mse", pred, target)?;
    let s = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>();
    Ok(s / T::of(pred.len() as f64))
}

/// Mean absolute error over all elements.
pub fn mae<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check("mae", pred, target)?;
    let s = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum::<T>();
    Ok(s / T::of(pred.len() as f64))
}
