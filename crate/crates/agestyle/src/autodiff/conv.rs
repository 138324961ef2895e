//! Raw 2-d convolution kernels (forward, input-gradient, kernel-gradient).
//!
//! All three are lowerings to matrix multiplication via im2col/col2im, run
//! per batch element in parallel. They form a closed family under
//! differentiation: the adjoint of each one is expressed with the other two,
//! which is what lets the tape differentiate through convolutions twice.

use ndarray::{Array2, Array4, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;

use super::Scalar;

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn pad_sample<T: Scalar>(x: &ArrayView3<T>, pad: usize) -> ndarray::Array3<T> {
    let (c, h, w) = x.dim();
    if pad == 0 {
        return x.to_owned();
    }
    let mut out = ndarray::Array3::zeros((c, h + 2 * pad, w + 2 * pad));
    out.slice_mut(ndarray::s![.., pad..pad + h, pad..pad + w])
        .assign(x);
    out
}

/// Unfold one padded sample into a (C*KH*KW, HO*WO) patch matrix.
fn im2col<T: Scalar>(
    xp: &ndarray::Array3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Array2<T> {
    let (c, _, _) = xp.dim();
    let mut col = Array2::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut dst = col.row_mut(row);
                for oy in 0..ho {
                    let sy = oy * stride + ky;
                    for ox in 0..wo {
                        dst[oy * wo + ox] = xp[(ci, sy, ox * stride + kx)];
                    }
                }
            }
        }
    }
    col
}

/// Fold a (C*KH*KW, HO*WO) patch-gradient matrix back onto a padded sample.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &Array2<T>,
    c: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array3<T> {
    let mut out = ndarray::Array3::zeros((c, hp, wp));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = col.row(row);
                for oy in 0..ho {
                    let sy = oy * stride + ky;
                    for ox in 0..wo {
                        out[(ci, sy, ox * stride + kx)] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    out
}

/// y[b, o] = sum_{c,ky,kx} x[b, c, ·] * w[o, c, ky, kx], stride/pad as given.
pub fn conv2d_fwd<T: Scalar>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (b, c_in, h, wdt) = x.dim();
    let (c_out, c_in_w, kh, kw) = w.dim();
    assert_eq!(c_in, c_in_w, "conv2d: channel mismatch");
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(wdt, kw, stride, pad);
    let w_mat = w
        .to_shape((c_out, c_in * kh * kw))
        .expect("kernel reshape")
        .to_owned();

    let samples: Vec<Array2<T>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let xp = pad_sample(&x.index_axis(Axis(0), bi), pad);
            let col = im2col(&xp, kh, kw, stride, ho, wo);
            w_mat.dot(&col)
        })
        .collect();

    let mut out = Array4::zeros((b, c_out, ho, wo));
    for (bi, s) in samples.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), bi)
            .assign(&s.into_shape_with_order((c_out, ho, wo)).expect("reshape"));
    }
    out
}

/// Gradient of `conv2d_fwd` with respect to its input; equivalently, the
/// forward pass of a transposed convolution mapping `g`'s channels onto
/// `in_hw`-sized maps.
pub fn conv2d_dinput<T: Scalar>(
    g: &ArrayView4<T>,
    w: &ArrayView4<T>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Array4<T> {
    let (b, c_out, ho, wo) = g.dim();
    let (c_out_w, c_in, kh, kw) = w.dim();
    assert_eq!(c_out, c_out_w, "conv2d_dinput: channel mismatch");
    let (h, wdt) = in_hw;
    assert_eq!(
        ho,
        conv_out_size(h, kh, stride, pad),
        "conv2d_dinput: height"
    );
    assert_eq!(
        wo,
        conv_out_size(wdt, kw, stride, pad),
        "conv2d_dinput: width"
    );
    let w_mat_t = w
        .to_shape((c_out, c_in * kh * kw))
        .expect("kernel reshape")
        .t()
        .to_owned();

    let samples: Vec<ndarray::Array3<T>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let g_mat = g
                .index_axis(Axis(0), bi)
                .to_shape((c_out, ho * wo))
                .expect("grad reshape")
                .to_owned();
            let col = w_mat_t.dot(&g_mat);
            let padded = col2im(
                &col,
                c_in,
                h + 2 * pad,
                wdt + 2 * pad,
                kh,
                kw,
                stride,
                ho,
                wo,
            );
            padded
                .slice(ndarray::s![.., pad..pad + h, pad..pad + wdt])
                .to_owned()
        })
        .collect();

    let mut out = Array4::zeros((b, c_in, h, wdt));
    for (bi, s) in samples.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), bi).assign(&s);
    }
    out
}

/// Gradient of `conv2d_fwd` with respect to its kernel.
pub fn conv2d_dkernel<T: Scalar>(
    x: &ArrayView4<T>,
    g: &ArrayView4<T>,
    stride: usize,
    pad: usize,
    k_hw: (usize, usize),
) -> Array4<T> {
    let (b, c_in, h, wdt) = x.dim();
    let (bg, c_out, ho, wo) = g.dim();
    assert_eq!(b, bg, "conv2d_dkernel: batch mismatch");
    let (kh, kw) = k_hw;
    assert_eq!(
        ho,
        conv_out_size(h, kh, stride, pad),
        "conv2d_dkernel: height"
    );
    assert_eq!(
        wo,
        conv_out_size(wdt, kw, stride, pad),
        "conv2d_dkernel: width"
    );

    let partials: Vec<Array2<T>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let xp = pad_sample(&x.index_axis(Axis(0), bi), pad);
            let col = im2col(&xp, kh, kw, stride, ho, wo);
            let g_mat = g
                .index_axis(Axis(0), bi)
                .to_shape((c_out, ho * wo))
                .expect("grad reshape")
                .to_owned();
            g_mat.dot(&col.t())
        })
        .collect();

    let mut acc = Array2::zeros((c_out, c_in * kh * kw));
    for p in partials {
        acc += &p;
    }
    acc.into_shape_with_order((c_out, c_in, kh, kw))
        .expect("kernel reshape")
}
