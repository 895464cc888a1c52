//! 3-D convolution (cross-correlation) over `(B, C, S, H, W)` tensors and its
//! adjoints. Kernels are laid out `(Cout, Cin, kS, kH, kW)`.
//!
//! The forward pass lowers each batch item to an im2col matrix and runs one
//! GEMM; the two adjoints reuse the same lowering.

use crate::error::{bail, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::real::Real;
use crate::tensor::Tensor;

/// Stride and zero padding per `(S, H, W)` axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for Conv3dGeometry {
    fn default() -> Self {
        Conv3dGeometry { stride: [1; 3], padding: [0; 3] }
    }
}

impl Conv3dGeometry {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Conv3dGeometry { stride, padding }
    }

    /// Stride 1 with padding that preserves extents for an odd kernel.
    pub fn same(kernel: [usize; 3]) -> Self {
        Conv3dGeometry { stride: [1; 3], padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2] }
    }

    /// Output extents for the given input and kernel extents.
    pub fn output_extents(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for d in 0..3 {
            if kernel[d] % 2 == 0 {
                bail!(Geometry, "kernel extents must be odd, got {kernel:?}");
            }
            if self.stride[d] == 0 {
                bail!(Geometry, "stride must be positive, got {:?}", self.stride);
            }
            let padded = input[d] + 2 * self.padding[d];
            if padded < kernel[d] {
                bail!(
                    Geometry,
                    "padded extent {padded} smaller than kernel extent {} on axis {d}",
                    kernel[d]
                );
            }
            out[d] = (padded - kernel[d]) / self.stride[d] + 1;
        }
        Ok(out)
    }

    fn is_pointwise(&self, kernel: [usize; 3]) -> bool {
        kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }
}

struct Plan {
    batch: usize,
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
}

impl Plan {
    fn new(x_shape: &[usize], k_shape: &[usize], geom: &Conv3dGeometry) -> Result<Plan> {
        let (b, c_in, input) = match *x_shape {
            [b, c, s, h, w] => (b, c, [s, h, w]),
            _ => bail!(Dimension, "conv3d input must be 5-D, got {x_shape:?}"),
        };
        let (c_out, kc_in, kernel) = match *k_shape {
            [o, i, s, h, w] => (o, i, [s, h, w]),
            _ => bail!(Dimension, "conv3d kernel must be 5-D, got {k_shape:?}"),
        };
        if kc_in != c_in {
            bail!(Dimension, "conv3d input has {c_in} channels, kernel expects {kc_in}");
        }
        let output = geom.output_extents(input, kernel)?;
        Ok(Plan { batch: b, c_in, c_out, input, kernel, output })
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.output[0], self.output[1], self.output[2]]
    }
}

/// Range of output positions `o` with `0 <= o * stride + k - pad < n_in`.
fn valid_range(n_out: usize, n_in: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > k { ((n_in - 1 + pad - k) / stride + 1).min(n_out) } else { 0 };
    (lo.min(hi), hi)
}

/// Visits every (kernel-row, output-line) pair: `f(row, out_line, src_line)`,
/// with `src_line == None` when the line is entirely padding.
fn for_each_line(
    p: &Plan,
    geom: &Conv3dGeometry,
    mut f: impl FnMut(usize, usize, Option<usize>, usize, (usize, usize)),
) {
    let [is, ih, iw] = p.input;
    let [os, oh, _] = p.output;
    let [ks, kh, kw] = p.kernel;
    let mut row = 0;
    for ci in 0..p.c_in {
        for a in 0..ks {
            for b in 0..kh {
                for c in 0..kw {
                    let wr = valid_range(p.output[2], iw, c, geom.stride[2], geom.padding[2]);
                    for so in 0..os {
                        let s = (so * geom.stride[0] + a) as isize - geom.padding[0] as isize;
                        for ho in 0..oh {
                            let h = (ho * geom.stride[1] + b) as isize - geom.padding[1] as isize;
                            let line = so * oh + ho;
                            let src = if s < 0 || s >= is as isize || h < 0 || h >= ih as isize {
                                None
                            } else {
                                Some(((ci * is + s as usize) * ih + h as usize) * iw)
                            };
                            f(row, line, src, c, wr);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<T: Real>(p: &Plan, geom: &Conv3dGeometry, x: &[T], col: &mut [T]) {
    let n = p.out_vol();
    let ow = p.output[2];
    let (st, pad) = (geom.stride[2], geom.padding[2]);
    for_each_line(p, geom, |row, line, src, c, (lo, hi)| {
        let dst = &mut col[row * n + line * ow..row * n + (line + 1) * ow];
        match src {
            None => dst.fill(T::zero()),
            Some(base) => {
                dst[..lo].fill(T::zero());
                dst[hi..].fill(T::zero());
                if st == 1 {
                    let off = base + lo + c - pad;
                    dst[lo..hi].copy_from_slice(&x[off..off + (hi - lo)]);
                } else {
                    for (wo, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                        *d = x[base + wo * st + c - pad];
                    }
                }
            }
        }
    });
}

fn col2im<T: Real>(p: &Plan, geom: &Conv3dGeometry, col: &[T], x: &mut [T]) {
    let n = p.out_vol();
    let ow = p.output[2];
    let (st, pad) = (geom.stride[2], geom.padding[2]);
    for_each_line(p, geom, |row, line, src, c, (lo, hi)| {
        if let Some(base) = src {
            let from = &col[row * n + line * ow..row * n + (line + 1) * ow];
            for wo in lo..hi {
                let xi = base + wo * st + c - pad;
                x[xi] = x[xi] + from[wo];
            }
        }
    });
}

/// `y[b, o, ...] = sum_{i, k} x[b, i, pos * stride + k - pad] * kernel[o, i, k]`,
/// zero padded, no kernel flip.
pub fn conv3d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, geom: Conv3dGeometry) -> Result<Tensor<T>> {
    let p = Plan::new(x.shape(), kernel.shape(), &geom)?;
    let (n, kdim, in_vol) = (p.out_vol(), p.c_in * p.k_vol(), p.in_vol());
    let mut y = vec![T::zero(); p.batch * p.c_out * n];
    let pointwise = geom.is_pointwise(p.kernel);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kdim * n] };
    for b in 0..p.batch {
        let xb = &x.data()[b * p.c_in * in_vol..(b + 1) * p.c_in * in_vol];
        let cols: &[T] = if pointwise {
            xb
        } else {
            im2col(&p, &geom, xb, &mut col);
            &col
        };
        let yb = &mut y[b * p.c_out * n..(b + 1) * p.c_out * n];
        gemm(
            T::one(),
            MatRef::rows(kernel.data(), p.c_out, kdim),
            MatRef::rows(cols, kdim, n),
            T::zero(),
            MatMut::rows(yb, p.c_out, n),
        );
    }
    Tensor::new(p.out_shape(), y)
}

/// Adjoint of [`conv3d`] with respect to its input.
pub fn conv3d_grad_input<T: Real>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    x_shape: &[usize],
    geom: Conv3dGeometry,
) -> Result<Tensor<T>> {
    let p = Plan::new(x_shape, kernel.shape(), &geom)?;
    if grad_out.shape() != p.out_shape() {
        bail!(Dimension, "conv3d gradient shape {:?}, expected {:?}", grad_out.shape(), p.out_shape());
    }
    let (n, kdim, in_vol) = (p.out_vol(), p.c_in * p.k_vol(), p.in_vol());
    let mut dx = vec![T::zero(); p.batch * p.c_in * in_vol];
    let pointwise = geom.is_pointwise(p.kernel);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kdim * n] };
    for b in 0..p.batch {
        let gb = &grad_out.data()[b * p.c_out * n..(b + 1) * p.c_out * n];
        let dxb = &mut dx[b * p.c_in * in_vol..(b + 1) * p.c_in * in_vol];
        let kt = MatRef::rows_t(kernel.data(), p.c_out, kdim);
        if pointwise {
            gemm(T::one(), kt, MatRef::rows(gb, p.c_out, n), T::zero(), MatMut::rows(dxb, kdim, n));
        } else {
            gemm(T::one(), kt, MatRef::rows(gb, p.c_out, n), T::zero(), MatMut::rows(&mut col, kdim, n));
            col2im(&p, &geom, &col, dxb);
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// Adjoint of [`conv3d`] with respect to its kernel.
pub fn conv3d_grad_kernel<T: Real>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    k_shape: &[usize],
    geom: Conv3dGeometry,
) -> Result<Tensor<T>> {
    let p = Plan::new(x.shape(), k_shape, &geom)?;
    if grad_out.shape() != p.out_shape() {
        bail!(Dimension, "conv3d gradient shape {:?}, expected {:?}", grad_out.shape(), p.out_shape());
    }
    let (n, kdim, in_vol) = (p.out_vol(), p.c_in * p.k_vol(), p.in_vol());
    let mut dk = vec![T::zero(); p.c_out * kdim];
    let pointwise = geom.is_pointwise(p.kernel);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kdim * n] };
    for b in 0..p.batch {
        let xb = &x.data()[b * p.c_in * in_vol..(b + 1) * p.c_in * in_vol];
        let cols: &[T] = if pointwise {
            xb
        } else {
            im2col(&p, &geom, xb, &mut col);
            &col
        };
        let gb = &grad_out.data()[b * p.c_out * n..(b + 1) * p.c_out * n];
        gemm(
            T::one(),
            MatRef::rows(gb, p.c_out, n),
            MatRef::rows_t(cols, kdim, n),
            T::one(),
            MatMut::rows(&mut dk, p.c_out, kdim),
        );
    }
    Tensor::new(k_shape.to_vec(), dk)
}

/// Output shape of a transposed convolution with kernel `(Cin, Cout, k...)`.
pub fn conv_transpose3d_shape(
    x_shape: &[usize],
    k_shape: &[usize],
    geom: Conv3dGeometry,
    output_padding: [usize; 3],
) -> Result<Vec<usize>> {
    let [b, c_in, s, h, w]: [usize; 5] =
        x_shape.try_into().map_err(|_| dim_err("transposed conv input", x_shape))?;
    let [kc_in, c_out, ks, kh, kw]: [usize; 5] =
        k_shape.try_into().map_err(|_| dim_err("transposed conv kernel", k_shape))?;
    if kc_in != c_in {
        bail!(Dimension, "transposed conv input has {c_in} channels, kernel expects {kc_in}");
    }
    let mut out = vec![b, c_out, 0, 0, 0];
    for (d, (&n, &k)) in [s, h, w].iter().zip(&[ks, kh, kw]).enumerate() {
        if output_padding[d] >= geom.stride[d] {
            bail!(Geometry, "output padding must be smaller than the stride on axis {d}");
        }
        let full = (n - 1) * geom.stride[d] + k + output_padding[d];
        if full <= 2 * geom.padding[d] {
            bail!(Geometry, "transposed conv output extent is not positive on axis {d}");
        }
        out[2 + d] = full - 2 * geom.padding[d];
    }
    Ok(out)
}

fn dim_err(what: &str, shape: &[usize]) -> crate::error::Error {
    crate::error::Error::Dimension(format!("{what} must be 5-D, got {shape:?}"))
}

/// Transposed convolution: the adjoint of [`conv3d`] applied as a forward map.
/// Kernel layout `(Cin, Cout, kS, kH, kW)`.
pub fn conv_transpose3d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: Conv3dGeometry,
    output_padding: [usize; 3],
) -> Result<Tensor<T>> {
    let out_shape = conv_transpose3d_shape(x.shape(), kernel.shape(), geom, output_padding)?;
    conv3d_grad_input(x, kernel, &out_shape, geom)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, g: Conv3dGeometry) -> Tensor<f64> {
        let [b, ci, s, h, w] = x.dims5().unwrap();
        let [co, _, ks, kh, kw] = k.dims5().unwrap();
        let out = g.output_extents([s, h, w], [ks, kh, kw]).unwrap();
        let mut y = Tensor::zeros([b, co, out[0], out[1], out[2]]);
        for bb in 0..b {
            for o in 0..co {
                for so in 0..out[0] {
                    for ho in 0..out[1] {
                        for wo in 0..out[2] {
                            let mut acc = 0.0;
                            for i in 0..ci {
                                for a in 0..ks {
                                    for c in 0..kh {
                                        for d in 0..kw {
                                            let ss = (so * g.stride[0] + a) as isize - g.padding[0] as isize;
                                            let hh = (ho * g.stride[1] + c) as isize - g.padding[1] as isize;
                                            let ww = (wo * g.stride[2] + d) as isize - g.padding[2] as isize;
                                            if ss < 0 || hh < 0 || ww < 0 || ss >= s as isize || hh >= h as isize || ww >= w as isize {
                                                continue;
                                            }
                                            acc += x.at(&[bb, i, ss as usize, hh as usize, ww as usize]) * k.at(&[o, i, a, c, d]);
                                        }
                                    }
                                }
                            }
                            let off = y.offset(&[bb, o, so, ho, wo]);
                            y.data_mut()[off] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape.to_vec(), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn scalar_product() {
        let x = Tensor::new([1, 1, 1, 1, 1], vec![2.0]).unwrap();
        let k = Tensor::new([1, 1, 1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(conv3d(&x, &k, Conv3dGeometry::default()).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matches_oracle_across_geometries() {
        let cases = [
            ([2, 3, 4, 5, 6], [4, 3, 3, 3, 3], Conv3dGeometry::same([3, 3, 3])),
            ([1, 2, 3, 8, 8], [3, 2, 3, 3, 3], Conv3dGeometry::new([1, 2, 2], [1, 1, 1])),
            ([1, 2, 1, 5, 7], [2, 2, 1, 3, 3], Conv3dGeometry::new([1, 1, 1], [0, 1, 1])),
            ([1, 1, 5, 5, 5], [1, 1, 3, 1, 3], Conv3dGeometry::new([2, 1, 3], [0, 0, 2])),
            ([2, 4, 2, 3, 3], [5, 4, 1, 1, 1], Conv3dGeometry::default()),
        ];
        for (i, (xs, ks, g)) in cases.into_iter().enumerate() {
            let x = pseudo(&xs, i as u64);
            let k = pseudo(&ks, 100 + i as u64);
            let got = conv3d(&x, &k, g).unwrap();
            let want = conv_oracle(&x, &k, g);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <conv(x, k), g> == <x, grad_input(g)> == <k, grad_kernel(x, g)>
        let g = Conv3dGeometry::new([1, 2, 2], [1, 1, 1]);
        let x = pseudo(&[2, 3, 3, 6, 6], 1);
        let k = pseudo(&[4, 3, 3, 3, 3], 2);
        let y = conv3d(&x, &k, g).unwrap();
        let dy = pseudo(y.shape(), 3);
        let lhs: f64 = y.mul(&dy).unwrap().sum();
        let dx = conv3d_grad_input(&dy, &k, x.shape(), g).unwrap();
        let dk = conv3d_grad_kernel(&x, &dy, k.shape(), g).unwrap();
        assert!((lhs - x.mul(&dx).unwrap().sum()).abs() < 1e-10);
        assert!((lhs - k.mul(&dk).unwrap().sum()).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_doubles_spatial_extent() {
        let x = pseudo(&[1, 4, 3, 4, 4], 5);
        let k = pseudo(&[4, 2, 3, 3, 3], 6);
        let y = conv_transpose3d(&x, &k, Conv3dGeometry::new([1, 2, 2], [1, 1, 1]), [0, 1, 1]).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 8, 8]);
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = pseudo(&[1, 1, 1, 2, 2], 0);
        let k = pseudo(&[1, 1, 3, 3, 3], 0);
        assert!(matches!(conv3d(&x, &k, Conv3dGeometry::default()), Err(crate::Error::Geometry(_))));
        let k2 = pseudo(&[1, 2, 1, 1, 1], 0);
        assert!(matches!(conv3d(&x, &k2, Conv3dGeometry::default()), Err(crate::Error::Dimension(_))));
        let k3 = pseudo(&[1, 1, 2, 1, 1], 0);
        assert!(conv3d(&x, &k3, Conv3dGeometry::default()).is_err());
    }
}
