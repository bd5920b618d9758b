//! The masked reconstruction objective.

use super::{shape_err, MaskTensor, Scalar, Tensor4, TensorError};

/// Mean squared error over cells that are both selected by `vm` and finite in
/// `y_true`:
///
/// `loss = sum(vm * [finite] * (y_true - y_pred)^2) / sum(vm * [finite])`
///
/// Returns the loss together with its gradient with respect to `y_pred`,
/// `2 * vm * [finite] * (y_pred - y_true) / count`. Cells excluded by the
/// mask or holding non-finite targets contribute nothing to either. The sum
/// is accumulated in f64 regardless of `T`. Errors with
/// [`TensorError::EmptyMask`] when no cell qualifies.
pub fn masked_mse<T: Scalar>(
    y_true: &Tensor4<T>,
    y_pred: &Tensor4<T>,
    vm: &MaskTensor,
) -> Result<(T, Tensor4<T>), TensorError> {
    if !y_true.same_dims(y_pred) {
        return Err(shape_err(format!(
            "y_true {:?} vs y_pred {:?}",
            y_true.dims(),
            y_pred.dims()
        )));
    }
    if vm.dims() != y_true.dims() {
        return Err(shape_err(format!(
            "mask {:?} vs tensors {:?}",
            vm.dims(),
            y_true.dims()
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0u64;
    for ((&t, &p), &m) in y_true.values().iter().zip(y_pred.values()).zip(vm.cells()) {
        if m == 1 && t.is_finite() {
            let d = (t - p).to_f64();
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(TensorError::EmptyMask);
    }
    let denom = count as f64;
    let loss = T::from_f64(sum / denom);
    let (n, h, w, c) = y_true.dims();
    let mut grad = Tensor4::zeros(n, h, w, c);
    let scale = T::from_f64(2.0 / denom);
    for (g, ((&t, &p), &m)) in grad.values_mut().iter_mut().zip(
        y_true
            .values()
            .iter()
            .zip(y_pred.values())
            .zip(vm.cells()),
    ) {
        if m == 1 && t.is_finite() {
            *g = scale * (p - t);
        }
    }
    Ok((loss, grad))
}
