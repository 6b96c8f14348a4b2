//! im2col-based 2-D convolution and its transpose.
//!
//! The transposed convolution is implemented as the exact adjoint of the
//! forward convolution (same stride/padding semantics), which the tests
//! in the parent module verify through the inner-product identity
//! `<conv(x), y> == <x, conv_t(y)>` and by finite differences.

use ndarray::{Array1, Array2, Array4, ArrayView4};

/// Output spatial size of a convolution: floor((n + 2p - k) / s) + 1.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution: (n - 1)s - 2p + k.
pub fn conv_transpose2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Unfold (n, c, h, w) into a (c*kh*kw, n*ho*wo) matrix of patches.
fn im2col(
    x: &ArrayView4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let ho = conv2d_output_size(h, kh, stride, pad);
    let wo = conv2d_output_size(w, kw, stride, pad);
    let mut col = Array2::<f64>::zeros((c * kh * kw, n * ho * wo));
    for ci in 0..c {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                let mut row_view = col.row_mut(row);
                let dst = row_view.as_slice_mut().expect("contiguous row");
                for ni in 0..n {
                    let base = ni * ho * wo;
                    for oi in 0..ho {
                        let si = (oi * stride + di) as isize - pad as isize;
                        if si < 0 || si as usize >= h {
                            continue;
                        }
                        let si = si as usize;
                        for oj in 0..wo {
                            let sj = (oj * stride + dj) as isize - pad as isize;
                            if sj < 0 || sj as usize >= w {
                                continue;
                            }
                            dst[base + oi * wo + oj] = x[[ni, ci, si, sj as usize]];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold a (c*kh*kw, n*ho*wo) patch matrix back into (n, c, h, w),
/// accumulating overlaps. Adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let ho = conv2d_output_size(h, kh, stride, pad);
    let wo = conv2d_output_size(w, kw, stride, pad);
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    for ci in 0..c {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                let row_view = col.row(row);
                let src = row_view.as_slice().expect("contiguous row");
                for ni in 0..n {
                    let base = ni * ho * wo;
                    for oi in 0..ho {
                        let si = (oi * stride + di) as isize - pad as isize;
                        if si < 0 || si as usize >= h {
                            continue;
                        }
                        let si = si as usize;
                        for oj in 0..wo {
                            let sj = (oj * stride + dj) as isize - pad as isize;
                            if sj < 0 || sj as usize >= w {
                                continue;
                            }
                            x[[ni, ci, si, sj as usize]] += src[base + oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Reshape a (cout, n*ho*wo) result matrix into (n, cout, ho, wo).
fn mat_to_nchw(y: &Array2<f64>, n: usize, cout: usize, ho: usize, wo: usize) -> Array4<f64> {
    let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
    for co in 0..cout {
        let row_view = y.row(co);
        let src = row_view.as_slice().expect("contiguous row");
        for ni in 0..n {
            let base = ni * ho * wo;
            for oi in 0..ho {
                for oj in 0..wo {
                    out[[ni, co, oi, oj]] = src[base + oi * wo + oj];
                }
            }
        }
    }
    out
}

/// Flatten (n, cout, ho, wo) into a (cout, n*ho*wo) matrix.
fn nchw_to_mat(y: &ArrayView4<f64>) -> Array2<f64> {
    let (n, cout, ho, wo) = y.dim();
    let mut out = Array2::<f64>::zeros((cout, n * ho * wo));
    for co in 0..cout {
        let mut row_view = out.row_mut(co);
        let dst = row_view.as_slice_mut().expect("contiguous row");
        for ni in 0..n {
            let base = ni * ho * wo;
            for oi in 0..ho {
                for oj in 0..wo {
                    dst[base + oi * wo + oj] = y[[ni, co, oi, oj]];
                }
            }
        }
    }
    out
}

pub(super) fn conv2d_forward(
    x: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, cin, h, w) = x.dim();
    let (cout, wcin, kh, kw) = weight.dim();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than padded input");
    let ho = conv2d_output_size(h, kh, stride, pad);
    let wo = conv2d_output_size(w, kw, stride, pad);

    let col = im2col(x, kh, kw, stride, pad);
    let wmat = weight
        .to_shape((cout, cin * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let ymat = wmat.dot(&col);
    let mut y = mat_to_nchw(&ymat, n, cout, ho, wo);
    if let Some(b) = bias {
        assert_eq!(b.len(), cout);
        for co in 0..cout {
            let bv = b[co];
            y.index_axis_mut(ndarray::Axis(1), co).mapv_inplace(|v| v + bv);
        }
    }
    y
}

pub(super) fn conv2d_backward(
    x: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    grad_out: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, cin, h, w) = x.dim();
    let (cout, _, kh, kw) = weight.dim();

    let gmat = nchw_to_mat(grad_out);
    let col = im2col(x, kh, kw, stride, pad);

    let dw_mat = gmat.dot(&col.t());
    let dw = dw_mat
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("weight grad reshape");

    let wmat = weight
        .to_shape((cout, cin * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let dcol = wmat.t().dot(&gmat);
    let dx = col2im(&dcol, n, cin, h, w, kh, kw, stride, pad);

    let mut db = Array1::<f64>::zeros(cout);
    for co in 0..cout {
        db[co] = grad_out.index_axis(ndarray::Axis(1), co).sum();
    }
    (dx, dw, db)
}

pub(super) fn conv_transpose2d_forward(
    x: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, cin, hi, wi) = x.dim();
    let (wcin, cout, kh, kw) = weight.dim();
    assert_eq!(cin, wcin, "conv_transpose2d channel mismatch");
    let ho = conv_transpose2d_output_size(hi, kh, stride, pad);
    let wo = conv_transpose2d_output_size(wi, kw, stride, pad);

    // y = adjoint-of-conv applied to x: scatter weighted input values.
    let xmat = nchw_to_mat(x); // (cin, n*hi*wi)
    let wmat = weight
        .to_shape((cin, cout * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let colt = wmat.t().dot(&xmat); // (cout*kh*kw, n*hi*wi)
    let mut y = col2im(&colt, n, cout, ho, wo, kh, kw, stride, pad);
    if let Some(b) = bias {
        assert_eq!(b.len(), cout);
        for co in 0..cout {
            let bv = b[co];
            y.index_axis_mut(ndarray::Axis(1), co).mapv_inplace(|v| v + bv);
        }
    }
    y
}

pub(super) fn conv_transpose2d_backward(
    x: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    grad_out: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, cin, hi, wi) = x.dim();
    let (_, cout, kh, kw) = weight.dim();

    // dX is the forward convolution of grad_out with the same kernel.
    let gcol = im2col(grad_out, kh, kw, stride, pad); // (cout*kh*kw, n*hi*wi)
    let wmat = weight
        .to_shape((cin, cout * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let dx_mat = wmat.dot(&gcol); // (cin, n*hi*wi)
    let mut dx = Array4::<f64>::zeros((n, cin, hi, wi));
    for ci in 0..cin {
        let row_view = dx_mat.row(ci);
        let src = row_view.as_slice().expect("contiguous row");
        for ni in 0..n {
            let base = ni * hi * wi;
            for oi in 0..hi {
                for oj in 0..wi {
                    dx[[ni, ci, oi, oj]] = src[base + oi * wi + oj];
                }
            }
        }
    }

    let xmat = nchw_to_mat(x); // (cin, n*hi*wi)
    let dw_mat = xmat.dot(&gcol.t()); // (cin, cout*kh*kw)
    let dw = dw_mat
        .into_shape_with_order((cin, cout, kh, kw))
        .expect("weight grad reshape");

    let mut db = Array1::<f64>::zeros(cout);
    for co in 0..cout {
        db[co] = grad_out.index_axis(ndarray::Axis(1), co).sum();
    }
    (dx, dw, db)
}
