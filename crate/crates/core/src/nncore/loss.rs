use super::{NnError, Real, Result, Tensor};

/// `(1/(2N)) * sum ||pred_i - label_i||^2` and its gradient `(pred - label)/N`.
pub fn euclidean_loss<T: Real>(pred: &Tensor<T>, label: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != label.shape() || pred.rank() == 0 {
        return Err(NnError::ShapeMismatch(format!(
            "loss: prediction {:?} vs label {:?}",
            pred.shape(),
            label.shape()
        )));
    }
    let n = pred.shape()[0].max(1) as f64;
    let mut sum = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, l) in pred.data().iter().zip(label.data()) {
        let d = p.as_f64() - l.as_f64();
        sum += d * d;
        grad.push(T::from_f64_lossy(d / n));
    }
    Ok((sum / (2.0 * n), Tensor::from_vec(pred.shape(), grad)?))
}
