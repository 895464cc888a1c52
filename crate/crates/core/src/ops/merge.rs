//! Gated spectral recurrence `O_i = (1 - W_i) Z_i + W_i O_{i-1}`, `O_0 = 0`,
//! over the band axis of `(B, C, S, H, W)` tensors.

use crate::error::{bail, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Band traversal order of one recurrence head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Ascending band index.
    Forward,
    /// Descending band index.
    Backward,
}

impl Direction {
    /// Band index visited at `step`.
    fn band(self, step: usize, bands: usize) -> usize {
        match self {
            Direction::Forward => step,
            Direction::Backward => bands - 1 - step,
        }
    }
}

fn check(z: &Tensor<impl Real>, w: &Tensor<impl Real>, split: usize) -> Result<[usize; 5]> {
    let dims = z.dims5()?;
    if z.shape() != w.shape() {
        bail!(Dimension, "candidates {:?} and gates {:?} differ in shape", z.shape(), w.shape());
    }
    if split > dims[1] {
        bail!(Dimension, "head split {split} exceeds channel count {}", dims[1]);
    }
    Ok(dims)
}

/// Runs the recurrence with channels `[0, split)` merged in ascending band
/// order and `[split, C)` in descending order.
pub fn spectral_merge<T: Real>(z: &Tensor<T>, w: &Tensor<T>, split: usize) -> Result<Tensor<T>> {
    let [b, c, s, h, wd] = check(z, w, split)?;
    if let Some(bad) = w.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        bail!(Contract, "merging weight {bad} outside [0, 1]");
    }
    let plane = h * wd;
    let (zd, wdat) = (z.data(), w.data());
    let mut out = vec![T::zero(); zd.len()];
    for bc in 0..b * c {
        let dir = if bc % c < split { Direction::Forward } else { Direction::Backward };
        let base = bc * s * plane;
        for step in 0..s {
            let i = base + dir.band(step, s) * plane;
            if step == 0 {
                for p in 0..plane {
                    out[i + p] = (T::one() - wdat[i + p]) * zd[i + p];
                }
            } else {
                let j = base + dir.band(step - 1, s) * plane;
                for p in 0..plane {
                    let g = wdat[i + p];
                    out[i + p] = (T::one() - g) * zd[i + p] + g * out[j + p];
                }
            }
        }
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Adjoint of [`spectral_merge`]: returns `(dZ, dW)` given the forward
/// output and the gradient flowing into it.
pub fn spectral_merge_backward<T: Real>(
    z: &Tensor<T>,
    w: &Tensor<T>,
    out: &Tensor<T>,
    grad_out: &Tensor<T>,
    split: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, c, s, h, wd] = check(z, w, split)?;
    out.expect_same_shape(z)?;
    grad_out.expect_same_shape(z)?;
    let plane = h * wd;
    let (zd, wdat, od, gd) = (z.data(), w.data(), out.data(), grad_out.data());
    let mut dz = vec![T::zero(); zd.len()];
    let mut dw = vec![T::zero(); zd.len()];
    let mut carry = vec![T::zero(); plane];
    for bc in 0..b * c {
        let dir = if bc % c < split { Direction::Forward } else { Direction::Backward };
        let base = bc * s * plane;
        for step in (0..s).rev() {
            let i = base + dir.band(step, s) * plane;
            let next = (step + 1 < s).then(|| base + dir.band(step + 1, s) * plane);
            let prev = (step > 0).then(|| base + dir.band(step - 1, s) * plane);
            for p in 0..plane {
                // total gradient reaching O_i: direct plus through O_{i+1}
                let g = match next {
                    Some(n) => gd[i + p] + wdat[n + p] * carry[p],
                    None => gd[i + p],
                };
                carry[p] = g;
                let o_prev = prev.map_or(T::zero(), |j| od[j + p]);
                dz[i + p] = (T::one() - wdat[i + p]) * g;
                dw[i + p] = g * (o_prev - zd[i + p]);
            }
        }
    }
    Ok((Tensor::new(z.shape().to_vec(), dz)?, Tensor::new(z.shape().to_vec(), dw)?))
}
