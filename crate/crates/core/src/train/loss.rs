use ndarray::{Array1, ArrayView1, Zip};

use crate::float::Float;

pub fn sigmoid<T: Float>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Mean binary cross-entropy over labels, in the overflow-free form
/// `max(z, 0) - z t + ln(1 + e^{-|z|})`.
pub fn bce_loss<T: Float>(logits: ArrayView1<T>, targets: &[u8]) -> T {
    let n = T::of(logits.len().max(1) as f64);
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            let t = if t != 0 { T::one() } else { T::zero() };
            z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p()
        })
        .sum::<T>()
        / n
}

/// Gradient of [`bce_loss`] with respect to the logits: `(sigmoid(z) - t) / n`.
pub fn bce_grad<T: Float>(logits: ArrayView1<T>, targets: &[u8]) -> Array1<T> {
    let n = T::of(logits.len().max(1) as f64);
    let targets = ArrayView1::from(targets);
    Zip::from(&logits)
        .and(&targets)
        .map_collect(|&z, &t| (sigmoid(z) - if t != 0 { T::one() } else { T::zero() }) / n)
}
