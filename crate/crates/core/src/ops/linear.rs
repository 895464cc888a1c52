//! Position-wise linear maps along one axis: `y[.., c', ..] = sum_c x[.., c, ..] w[c, c']`.

use crate::error::{bail, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::real::Real;
use crate::tensor::{split_axis, Tensor};

fn weight_dims<T: Real>(w: &Tensor<T>, c: usize) -> Result<usize> {
    match *w.shape() {
        [rows, cols] if rows == c => Ok(cols),
        _ => bail!(Dimension, "weight {:?} does not map a channel axis of extent {c}", w.shape()),
    }
}

/// Applies `w: [C, C']` to the `axis` of `x` at every other index.
pub fn linear_along<T: Real>(x: &Tensor<T>, w: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, c, inner) = split_axis(x.shape(), axis)?;
    let c_out = weight_dims(w, c)?;
    let mut y = vec![T::zero(); outer * c_out * inner];
    if inner == 1 {
        gemm(
            T::one(),
            MatRef::rows(x.data(), outer, c),
            MatRef::rows(w.data(), c, c_out),
            T::zero(),
            MatMut::rows(&mut y, outer, c_out),
        );
    } else {
        for o in 0..outer {
            gemm(
                T::one(),
                MatRef::rows_t(w.data(), c, c_out),
                MatRef::rows(&x.data()[o * c * inner..(o + 1) * c * inner], c, inner),
                T::zero(),
                MatMut::rows(&mut y[o * c_out * inner..(o + 1) * c_out * inner], c_out, inner),
            );
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = c_out;
    Tensor::new(shape, y)
}

/// Adjoint of [`linear_along`] with respect to `x`.
pub fn linear_grad_input<T: Real>(grad_out: &Tensor<T>, w: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, c_out, inner) = split_axis(grad_out.shape(), axis)?;
    let [c, wc_out]: [usize; 2] = w.shape().try_into().map_err(|_| {
        crate::Error::Dimension(format!("weight must be a matrix, got {:?}", w.shape()))
    })?;
    if wc_out != c_out {
        bail!(Dimension, "gradient axis {c_out} does not match weight {:?}", w.shape());
    }
    let mut dx = vec![T::zero(); outer * c * inner];
    if inner == 1 {
        gemm(
            T::one(),
            MatRef::rows(grad_out.data(), outer, c_out),
            MatRef::rows_t(w.data(), c, c_out),
            T::zero(),
            MatMut::rows(&mut dx, outer, c),
        );
    } else {
        for o in 0..outer {
            gemm(
                T::one(),
                MatRef::rows(w.data(), c, c_out),
                MatRef::rows(&grad_out.data()[o * c_out * inner..(o + 1) * c_out * inner], c_out, inner),
                T::zero(),
                MatMut::rows(&mut dx[o * c * inner..(o + 1) * c * inner], c, inner),
            );
        }
    }
    let mut shape = grad_out.shape().to_vec();
    shape[axis] = c;
    Tensor::new(shape, dx)
}

/// Adjoint of [`linear_along`] with respect to `w`.
pub fn linear_grad_weight<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, c, inner) = split_axis(x.shape(), axis)?;
    let (g_outer, c_out, g_inner) = split_axis(grad_out.shape(), axis)?;
    if g_outer != outer || g_inner != inner {
        bail!(Dimension, "gradient {:?} does not match input {:?}", grad_out.shape(), x.shape());
    }
    let mut dw = vec![T::zero(); c * c_out];
    if inner == 1 {
        gemm(
            T::one(),
            MatRef::rows_t(x.data(), outer, c),
            MatRef::rows(grad_out.data(), outer, c_out),
            T::zero(),
            MatMut::rows(&mut dw, c, c_out),
        );
    } else {
        for o in 0..outer {
            gemm(
                T::one(),
                MatRef::rows(&x.data()[o * c * inner..(o + 1) * c * inner], c, inner),
                MatRef::rows_t(&grad_out.data()[o * c_out * inner..(o + 1) * c_out * inner], c_out, inner),
                T::one(),
                MatMut::rows(&mut dw, c, c_out),
            );
        }
    }
    Tensor::new([c, c_out], dw)
}

/// Adds a 1-D `bias` broadcast along `axis`.
pub fn add_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, c, inner) = split_axis(x.shape(), axis)?;
    if bias.shape() != [c] {
        bail!(Dimension, "bias {:?} does not match axis extent {c}", bias.shape());
    }
    let mut y = x.clone();
    for o in 0..outer {
        for (ci, &b) in bias.data().iter().enumerate() {
            let base = (o * c + ci) * inner;
            for v in &mut y.data_mut()[base..base + inner] {
                *v = *v + b;
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`add_bias`] with respect to the bias: sum over all other axes.
pub fn bias_grad<T: Real>(grad_out: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, c, inner) = split_axis(grad_out.shape(), axis)?;
    let mut db = vec![T::zero(); c];
    for o in 0..outer {
        for (ci, acc) in db.iter_mut().enumerate() {
            let base = (o * c + ci) * inner;
            *acc = *acc + grad_out.data()[base..base + inner].iter().copied().sum::<T>();
        }
    }
    Tensor::new([c], db)
}
