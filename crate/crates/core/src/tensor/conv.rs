//! Forward/backward kernels for conv2d (3x3, same padding), stride-2 2x2
//! transposed conv, and 2x2 max pooling. Convolutions lower to im2col plus a
//! GEMM; backward recomputes the im2col matrix instead of caching it.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{Real, Shape};

/// Lower one sample (c, h, w) into a (c*9, h*w) patch matrix for a 3x3
/// kernel with zero padding 1. Row r = ci*9 + ky*3 + kx holds the input at
/// (ci, y+ky-1, x+kx-1) for every output pixel (y, x).
fn im2col3x3<R: Real>(src: &[R], c: usize, h: usize, w: usize, cols: &mut [R]) {
    let plane = h * w;
    debug_assert_eq!(src.len(), c * plane);
    debug_assert_eq!(cols.len(), c * 9 * plane);
    for ci in 0..c {
        for ky in 0..3usize {
            let dy = ky as isize - 1;
            for kx in 0..3usize {
                let dx = kx as isize - 1;
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * plane..][..plane];
                let lo = (-dx).max(0) as usize;
                let hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(R::zero());
                        continue;
                    }
                    let src_row = &src[(ci * h + sy as usize) * w..][..w];
                    dst[..lo].fill(R::zero());
                    dst[hi..].fill(R::zero());
                    let s_lo = (lo as isize + dx) as usize;
                    let s_hi = (hi as isize + dx) as usize;
                    dst[lo..hi].copy_from_slice(&src_row[s_lo..s_hi]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col3x3`]: scatter-add a (c*9, h*w) matrix back onto the
/// (c, h, w) input layout.
fn col2im3x3_add<R: Real>(cols: &[R], c: usize, h: usize, w: usize, dst: &mut [R]) {
    let plane = h * w;
    for ci in 0..c {
        for ky in 0..3usize {
            let dy = ky as isize - 1;
            for kx in 0..3usize {
                let dx = kx as isize - 1;
                let row = &cols[(ci * 9 + ky * 3 + kx) * plane..][..plane];
                let lo = (-dx).max(0) as usize;
                let hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[(ci * h + sy as usize) * w..][..w];
                    let src_row = &row[y * w..(y + 1) * w];
                    let off = dx;
                    for x in lo..hi {
                        dst_row[(x as isize + off) as usize] += src_row[x];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<R: Real>(
    x: &[R],
    xs: Shape,
    weight: &[R],
    cout: usize,
    bias: Option<&[R]>,
) -> Vec<R> {
    let plane = xs.plane();
    let k = xs.c * 9;
    let mut out = vec![R::zero(); xs.n * cout * plane];
    let mut cols = vec![R::zero(); k * plane];
    let w_mat = ArrayView2::from_shape((cout, k), weight).expect("weight layout");
    for n in 0..xs.n {
        im2col3x3(&x[n * xs.c * plane..][..xs.c * plane], xs.c, xs.h, xs.w, &mut cols);
        let cols_m = ArrayView2::from_shape((k, plane), &cols[..]).expect("cols layout");
        let mut out_m =
            ArrayViewMut2::from_shape((cout, plane), &mut out[n * cout * plane..][..cout * plane])
                .expect("out layout");
        general_mat_mul(R::one(), &w_mat, &cols_m, R::zero(), &mut out_m);
    }
    if let Some(b) = bias {
        for n in 0..xs.n {
            for co in 0..cout {
                let bv = b[co];
                for v in &mut out[(n * cout + co) * plane..][..plane] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_weight<R: Real>(
    x: &[R],
    xs: Shape,
    g_out: &[R],
    cout: usize,
    g_w: &mut [R],
) {
    let plane = xs.plane();
    let k = xs.c * 9;
    let mut cols = vec![R::zero(); k * plane];
    for n in 0..xs.n {
        im2col3x3(&x[n * xs.c * plane..][..xs.c * plane], xs.c, xs.h, xs.w, &mut cols);
        let cols_m = ArrayView2::from_shape((k, plane), &cols[..]).expect("cols layout");
        let g_m = ArrayView2::from_shape((cout, plane), &g_out[n * cout * plane..][..cout * plane])
            .expect("grad layout");
        let mut gw_m = ArrayViewMut2::from_shape((cout, k), g_w).expect("gw layout");
        general_mat_mul(R::one(), &g_m, &cols_m.t(), R::one(), &mut gw_m);
    }
}

pub(crate) fn conv2d_backward_input<R: Real>(
    weight: &[R],
    ws: Shape,
    g_out: &[R],
    xs: Shape,
    g_x: &mut [R],
) {
    let plane = xs.plane();
    let cout = ws.n;
    let k = xs.c * 9;
    let w_mat = ArrayView2::from_shape((cout, k), weight).expect("weight layout");
    let mut dcols = vec![R::zero(); k * plane];
    for n in 0..xs.n {
        let g_m = ArrayView2::from_shape((cout, plane), &g_out[n * cout * plane..][..cout * plane])
            .expect("grad layout");
        let mut dcols_m =
            ArrayViewMut2::from_shape((k, plane), &mut dcols[..]).expect("dcols layout");
        general_mat_mul(R::one(), &w_mat.t(), &g_m, R::zero(), &mut dcols_m);
        col2im3x3_add(
            &dcols,
            xs.c,
            xs.h,
            xs.w,
            &mut g_x[n * xs.c * plane..][..xs.c * plane],
        );
    }
}

/// d loss / d bias for a per-output-channel bias broadcast over (n, plane).
pub(crate) fn channel_bias_backward<R: Real>(
    g_out: &[R],
    n: usize,
    c: usize,
    plane: usize,
    g_b: &mut [R],
) {
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = 0.0f64;
            for &g in &g_out[(ni * c + ci) * plane..][..plane] {
                acc += g.to_f64();
            }
            g_b[ci] += R::from_f64(acc);
        }
    }
}

/// Stride-2 2x2 transposed convolution. Because stride equals kernel size,
/// every output pixel receives exactly one (input pixel, tap) contribution:
/// out[n, co, 2y+p, 2x+q] = sum_ci x[n, ci, y, x] * w[ci, co, p, q] + b[co].
pub(crate) fn transposed_conv2d_forward<R: Real>(
    x: &[R],
    xs: Shape,
    weight: &[R],
    cout: usize,
    bias: Option<&[R]>,
) -> Vec<R> {
    let plane = xs.plane();
    let (oh, ow) = (xs.h * 2, xs.w * 2);
    let oplane = oh * ow;
    let mut out = vec![R::zero(); xs.n * cout * oplane];
    let w_mat = ArrayView2::from_shape((xs.c, cout * 4), weight).expect("weight layout");
    let mut t = vec![R::zero(); cout * 4 * plane];
    for n in 0..xs.n {
        let x_m = ArrayView2::from_shape((xs.c, plane), &x[n * xs.c * plane..][..xs.c * plane])
            .expect("x layout");
        let mut t_m =
            ArrayViewMut2::from_shape((cout * 4, plane), &mut t[..]).expect("t layout");
        general_mat_mul(R::one(), &w_mat.t(), &x_m, R::zero(), &mut t_m);
        for co in 0..cout {
            let b = bias.map(|b| b[co]).unwrap_or_else(R::zero);
            for p in 0..2usize {
                for q in 0..2usize {
                    let row = &t[(co * 4 + p * 2 + q) * plane..][..plane];
                    for y in 0..xs.h {
                        let dst =
                            &mut out[((n * cout + co) * oh + 2 * y + p) * ow..][..ow];
                        let src = &row[y * xs.w..(y + 1) * xs.w];
                        for xcol in 0..xs.w {
                            dst[2 * xcol + q] = src[xcol] + b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gather the (n, cout, 2h, 2w) output gradient into per-sample
/// (cout*4, h*w) matrices matching the forward scatter.
fn gather_tconv_grad<R: Real>(g_out: &[R], n: usize, xs: Shape, cout: usize, gy: &mut [R]) {
    let plane = xs.plane();
    let (oh, ow) = (xs.h * 2, xs.w * 2);
    for co in 0..cout {
        for p in 0..2usize {
            for q in 0..2usize {
                let row = &mut gy[(co * 4 + p * 2 + q) * plane..][..plane];
                for y in 0..xs.h {
                    let src = &g_out[((n * cout + co) * oh + 2 * y + p) * ow..][..ow];
                    let dst = &mut row[y * xs.w..(y + 1) * xs.w];
                    for xcol in 0..xs.w {
                        dst[xcol] = src[2 * xcol + q];
                    }
                }
            }
        }
    }
}

pub(crate) fn transposed_conv2d_backward_weight<R: Real>(
    x: &[R],
    xs: Shape,
    g_out: &[R],
    cout: usize,
    g_w: &mut [R],
) {
    let plane = xs.plane();
    let mut gy = vec![R::zero(); cout * 4 * plane];
    for n in 0..xs.n {
        gather_tconv_grad(g_out, n, xs, cout, &mut gy);
        let x_m = ArrayView2::from_shape((xs.c, plane), &x[n * xs.c * plane..][..xs.c * plane])
            .expect("x layout");
        let gy_m = ArrayView2::from_shape((cout * 4, plane), &gy[..]).expect("gy layout");
        let mut gw_m =
            ArrayViewMut2::from_shape((xs.c, cout * 4), g_w).expect("gw layout");
        general_mat_mul(R::one(), &x_m, &gy_m.t(), R::one(), &mut gw_m);
    }
}

pub(crate) fn transposed_conv2d_backward_input<R: Real>(
    weight: &[R],
    xs: Shape,
    g_out: &[R],
    cout: usize,
    g_x: &mut [R],
) {
    let plane = xs.plane();
    let w_mat = ArrayView2::from_shape((xs.c, cout * 4), weight).expect("weight layout");
    let mut gy = vec![R::zero(); cout * 4 * plane];
    for n in 0..xs.n {
        gather_tconv_grad(g_out, n, xs, cout, &mut gy);
        let gy_m = ArrayView2::from_shape((cout * 4, plane), &gy[..]).expect("gy layout");
        let mut gx_m = ArrayViewMut2::from_shape(
            (xs.c, plane),
            &mut g_x[n * xs.c * plane..][..xs.c * plane],
        )
        .expect("gx layout");
        general_mat_mul(R::one(), &w_mat, &gy_m, R::one(), &mut gx_m);
    }
}

/// 2x2 stride-2 max pooling; argmax records the flat input index fed by each
/// output element (first maximum in row-major window order on ties).
pub(crate) fn maxpool2d_forward<R: Real>(x: &[R], xs: Shape) -> (Vec<R>, Vec<u32>) {
    let (oh, ow) = (xs.h / 2, xs.w / 2);
    let count = xs.n * xs.c * oh * ow;
    let mut out = Vec::with_capacity(count);
    let mut argmax = Vec::with_capacity(count);
    for nc in 0..xs.n * xs.c {
        let base = nc * xs.plane();
        for y in 0..oh {
            for xcol in 0..ow {
                let i00 = base + (2 * y) * xs.w + 2 * xcol;
                let candidates = [i00, i00 + 1, i00 + xs.w, i00 + xs.w + 1];
                let mut best = candidates[0];
                let mut best_v = x[best];
                for &i in &candidates[1..] {
                    if x[i] > best_v {
                        best_v = x[i];
                        best = i;
                    }
                }
                out.push(best_v);
                argmax.push(best as u32);
            }
        }
    }
    (out, argmax)
}
