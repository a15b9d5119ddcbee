//! Raw array kernels shared by the tape ops and the no-grad forward path.
//!
//! Convolutions are im2col + gemm per image. All tensors are NCHW,
//! standard (row-major) layout.

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView4, ArrayViewMut2};

use super::Scalar;

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unpack an NCHW dynamic array into a 4-D view.
fn as4<T: Scalar>(x: &ArrayD<T>) -> ArrayView4<'_, T> {
    x.view().into_dimensionality().expect("expected NCHW tensor")
}

/// Borrow as standard (row-major, contiguous) layout, copying when needed.
fn std_layout<T: Scalar>(x: &ArrayD<T>) -> std::borrow::Cow<'_, ArrayD<T>> {
    if x.is_standard_layout() {
        std::borrow::Cow::Borrowed(x)
    } else {
        std::borrow::Cow::Owned(x.as_standard_layout().into_owned())
    }
}

/// im2col for one image (C,H,W) -> (C*kh*kw, oh*ow), row index (c*kh+ky)*kw+kx.
fn im2col<T: Scalar>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mut cols: ArrayViewMut2<'_, T>,
) {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut row_view = cols.row_mut(row);
                let out_row = row_view.as_slice_mut().expect("cols row contiguous");
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let base = oy * ow;
                    if iy < 0 || iy >= h as isize {
                        out_row[base..base + ow].fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        out_row[base + ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back onto an image plane.
fn col2im_add<T: Scalar>(
    cols: &Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    img: &mut [T],
) {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let row_view = cols.row(row);
                let src = row_view.as_slice().expect("cols row contiguous");
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward: x (N,C,H,W), w (O,C,kh,kw), b (O) -> (N,O,oh,ow).
pub fn conv2d_forward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    b: &ArrayD<T>,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let x = std_layout(x);
    let x = x.as_ref();
    let xv = as4(x);
    let (n, c, h, wd) = xv.dim();
    let wv = as4(w);
    let (o, wc, kh, kw) = wv.dim();
    assert_eq!(c, wc, "conv2d channel mismatch");
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(wd, kw, stride, pad);
    let ckk = c * kh * kw;

    let wslice = w.as_slice().expect("weights contiguous");
    let wmat = ArrayView2::from_shape((o, ckk), wslice).unwrap();
    let bs = b.as_slice().expect("bias contiguous");
    let xs = x.as_slice().expect("input contiguous");

    let mut out = Array4::<T>::zeros((n, o, oh, ow));
    let mut cols = Array2::<T>::zeros((ckk, oh * ow));
    for ni in 0..n {
        im2col(
            &xs[ni * c * h * wd..(ni + 1) * c * h * wd],
            c,
            h,
            wd,
            kh,
            kw,
            stride,
            pad,
            cols.view_mut(),
        );
        let out_slice = &mut out.as_slice_mut().unwrap()[ni * o * oh * ow..(ni + 1) * o * oh * ow];
        let mut omat = ArrayViewMut2::from_shape((o, oh * ow), out_slice).unwrap();
        ndarray::linalg::general_mat_mul(T::one(), &wmat, &cols.view(), T::zero(), &mut omat);
        for oi in 0..o {
            let bias = bs[oi];
            for v in &mut omat.row_mut(oi).into_slice().unwrap()[..] {
                *v += bias;
            }
        }
    }
    out.into_dyn()
}

/// Convolution backward. Returns (grad_x if requested, grad_w, grad_b).
pub fn conv2d_backward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    grad_out: &ArrayD<T>,
    stride: usize,
    pad: usize,
    need_grad_x: bool,
) -> (Option<ArrayD<T>>, ArrayD<T>, ArrayD<T>) {
    let x = std_layout(x);
    let x = x.as_ref();
    let grad_out = std_layout(grad_out);
    let grad_out = grad_out.as_ref();
    let xv = as4(x);
    let (n, c, h, wd) = xv.dim();
    let wv = as4(w);
    let (o, _, kh, kw) = wv.dim();
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(wd, kw, stride, pad);
    let ckk = c * kh * kw;

    let wslice = w.as_slice().expect("weights contiguous");
    let wmat = ArrayView2::from_shape((o, ckk), wslice).unwrap();
    let xs = x.as_slice().expect("input contiguous");
    let gs = grad_out.as_slice().expect("grad contiguous");

    let mut grad_w = Array2::<T>::zeros((o, ckk));
    let mut grad_b = ndarray::Array1::<T>::zeros(o);
    let mut grad_x = if need_grad_x {
        Some(vec![T::zero(); n * c * h * wd])
    } else {
        None
    };

    let mut cols = Array2::<T>::zeros((ckk, oh * ow));
    let mut gcols = Array2::<T>::zeros((ckk, oh * ow));
    for ni in 0..n {
        let gmat =
            ArrayView2::from_shape((o, oh * ow), &gs[ni * o * oh * ow..(ni + 1) * o * oh * ow])
                .unwrap();
        im2col(
            &xs[ni * c * h * wd..(ni + 1) * c * h * wd],
            c,
            h,
            wd,
            kh,
            kw,
            stride,
            pad,
            cols.view_mut(),
        );
        // dW += g . cols^T
        ndarray::linalg::general_mat_mul(T::one(), &gmat, &cols.t(), T::one(), &mut grad_w.view_mut());
        for oi in 0..o {
            let mut acc = T::zero();
            for &v in gmat.row(oi).as_slice().unwrap() {
                acc += v;
            }
            grad_b[oi] += acc;
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            // dcols = W^T . g, then scatter back
            ndarray::linalg::general_mat_mul(T::one(), &wmat.t(), &gmat, T::zero(), &mut gcols.view_mut());
            col2im_add(
                &gcols,
                c,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                &mut gx[ni * c * h * wd..(ni + 1) * c * h * wd],
            );
        }
    }

    let grad_x = grad_x.map(|v| {
        ndarray::Array::from_shape_vec((n, c, h, wd), v)
            .unwrap()
            .into_dyn()
    });
    let grad_w = grad_w
        .into_shape_with_order((o, c, kh, kw))
        .unwrap()
        .into_dyn();
    (grad_x, grad_w, grad_b.into_dyn())
}

/// Nearest-neighbour 2x upsample: (N,C,H,W) -> (N,C,2H,2W).
pub fn upsample_nearest2x_forward<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    let xv = as4(x);
    let (n, c, h, w) = xv.dim();
    let mut out = Array4::<T>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    let v = xv[(ni, ci, y, x_)];
                    out[(ni, ci, 2 * y, 2 * x_)] = v;
                    out[(ni, ci, 2 * y, 2 * x_ + 1)] = v;
                    out[(ni, ci, 2 * y + 1, 2 * x_)] = v;
                    out[(ni, ci, 2 * y + 1, 2 * x_ + 1)] = v;
                }
            }
        }
    }
    out.into_dyn()
}

/// Gradient of nearest 2x upsample: sum each 2x2 block.
pub fn upsample_nearest2x_backward<T: Scalar>(grad_out: &ArrayD<T>) -> ArrayD<T> {
    let gv = as4(grad_out);
    let (n, c, h2, w2) = gv.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    out[(ni, ci, y, x_)] = gv[(ni, ci, 2 * y, 2 * x_)]
                        + gv[(ni, ci, 2 * y, 2 * x_ + 1)]
                        + gv[(ni, ci, 2 * y + 1, 2 * x_)]
                        + gv[(ni, ci, 2 * y + 1, 2 * x_ + 1)];
                }
            }
        }
    }
    out.into_dyn()
}

/// 1-D index/weight pairs for 2x bilinear interpolation (align_corners=false).
/// Output index 2i   samples 0.25*in[i-1] + 0.75*in[i] (clamped),
/// output index 2i+1 samples 0.75*in[i]   + 0.25*in[i+1] (clamped).
fn bilinear_taps(i: usize, even: bool, len: usize) -> ((usize, f64), (usize, f64)) {
    if even {
        ((i.saturating_sub(1), 0.25), (i, 0.75))
    } else {
        ((i, 0.75), ((i + 1).min(len - 1), 0.25))
    }
}

/// Bilinear 2x upsample, align_corners=false: (N,C,H,W) -> (N,C,2H,2W).
pub fn upsample_bilinear2x_forward<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    let xv = as4(x);
    let (n, c, h, w) = xv.dim();
    // rows pass
    let mut rows = Array4::<T>::zeros((n, c, 2 * h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..2 * h {
                let i = oy / 2;
                let ((a, wa), (b, wb)) = bilinear_taps(i, oy % 2 == 0, h);
                let (wa, wb) = (T::from_f64_c(wa), T::from_f64_c(wb));
                for x_ in 0..w {
                    rows[(ni, ci, oy, x_)] = xv[(ni, ci, a, x_)] * wa + xv[(ni, ci, b, x_)] * wb;
                }
            }
        }
    }
    // cols pass
    let mut out = Array4::<T>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    let j = ox / 2;
                    let ((a, wa), (b, wb)) = bilinear_taps(j, ox % 2 == 0, w);
                    let (wa, wb) = (T::from_f64_c(wa), T::from_f64_c(wb));
                    out[(ni, ci, oy, ox)] =
                        rows[(ni, ci, oy, a)] * wa + rows[(ni, ci, oy, b)] * wb;
                }
            }
        }
    }
    out.into_dyn()
}

/// Gradient of bilinear 2x upsample (transpose of the forward scatter).
pub fn upsample_bilinear2x_backward<T: Scalar>(grad_out: &ArrayD<T>) -> ArrayD<T> {
    let gv = as4(grad_out);
    let (n, c, h2, w2) = gv.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    // cols transpose
    let mut rows = Array4::<T>::zeros((n, c, h2, w));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..h2 {
                for ox in 0..w2 {
                    let j = ox / 2;
                    let ((a, wa), (b, wb)) = bilinear_taps(j, ox % 2 == 0, w);
                    let g = gv[(ni, ci, oy, ox)];
                    rows[(ni, ci, oy, a)] += g * T::from_f64_c(wa);
                    rows[(ni, ci, oy, b)] += g * T::from_f64_c(wb);
                }
            }
        }
    }
    // rows transpose
    let mut out = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..h2 {
                let i = oy / 2;
                let ((a, wa), (b, wb)) = bilinear_taps(i, oy % 2 == 0, h);
                for x_ in 0..w {
                    let g = rows[(ni, ci, oy, x_)];
                    out[(ni, ci, a, x_)] += g * T::from_f64_c(wa);
                    out[(ni, ci, b, x_)] += g * T::from_f64_c(wb);
                }
            }
        }
    }
    out.into_dyn()
}
