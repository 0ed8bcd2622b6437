use ndarray::{Array1, ArrayView1};

use super::{ddlerp, lora_eval, LoraParams};
use crate::{Real, Result};

/// `exp(−exp(d))`, kept strictly inside `(0, 1)`.
///
/// For large `|d|` the exact value rounds to `0` or `1`; the result is pinned
/// to the nearest representable value inside the open interval.
pub fn decay_transform_scalar<T: Real>(d: T) -> T {
    let w = (-d.exp()).exp();
    let upper = T::one() - T::epsilon() / (T::one() + T::one());
    w.max(T::min_positive_value()).min(upper)
}

pub fn decay_transform<T: Real>(d: ArrayView1<'_, T>) -> Array1<T> {
    d.mapv(decay_transform_scalar)
}

/// Data-dependent decay `w_t = exp(−exp(lora_d(ddlerp_d(x_t, x_prev))))`.
pub fn dynamic_decay<T: Real>(
    x_t: ArrayView1<'_, T>,
    x_prev: ArrayView1<'_, T>,
    mu_x: ArrayView1<'_, T>,
    ddlerp_lora: &LoraParams<'_, T>,
    decay_lora: &LoraParams<'_, T>,
) -> Result<Array1<T>> {
    let mixed = ddlerp(x_t, x_prev, mu_x, ddlerp_lora)?;
    let d = lora_eval(mixed.view(), decay_lora)?;
    Ok(decay_transform(d.view()))
}
