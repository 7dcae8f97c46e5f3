use super::{NumericsError, Result, Scalar};

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(NumericsError::Empty("softmax"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite { op: "softmax" });
    }
    let mut out = vec![T::zero(); v.len()];
    softmax_into(v, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn softmax_into<T: Scalar>(v: &[T], out: &mut [T]) {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - m).exp();
        sum += *o;
    }
    let inv = T::one() / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// Normalize to zero mean / unit variance (population variance). No affine.
pub fn layer_norm<T: Scalar>(x: &[T], eps: f64) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    layer_norm_into(x, T::of(eps), &mut out);
    out
}

/// Returns `1/sqrt(var + eps)` for reuse in the backward pass.
#[inline]
pub(crate) fn layer_norm_into<T: Scalar>(x: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + eps).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    inv
}
