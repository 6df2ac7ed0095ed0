//! Convolution and transposed convolution, forward and backward.
//!
//! Convention: cross-correlation (no kernel flip), symmetric zero padding.
//! Forward conv runs as im2col + GEMM over row tiles; the transposed direction
//! (transposed-conv forward, conv input-gradient) runs the adjoint GEMM and a
//! col2im scatter parallelized over target channels so accumulation order is
//! fixed regardless of thread count.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, ArrayView2, ArrayViewMut2, ShapeBuilder};
use rayon::prelude::*;

/// Gradients of a convolution with respect to its operands.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Row-tile size keeping the per-task im2col buffer around 8 MB of f32.
const TILE_BUDGET_ELEMS: usize = 1 << 21;

fn tile_height(k: usize, wout: usize, hout: usize) -> usize {
    (TILE_BUDGET_ELEMS / (k * wout).max(1)).clamp(1, hout)
}

fn conv_out_extent(inp: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = inp + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn tconv_out_extent(inp: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let reach = (inp - 1) * stride + kernel;
    if reach < 2 * pad + 1 {
        return None;
    }
    Some(reach - 2 * pad)
}

/// Fills `col` (k_rows x tile_pos, row-major) with input patches for output
/// rows [r0, r1). Row index is (ci*kh + u)*kw + v; column index is
/// (y_out - r0)*wout + x_out. Out-of-image taps are zero.
#[allow(clippy::too_many_arguments)]
fn im2col_tile<T: Scalar>(
    input: &[T], // one batch element, cin*h*w
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    wout: usize,
    r0: usize,
    r1: usize,
    col: &mut [T],
) {
    let tile_pos = (r1 - r0) * wout;
    col.fill(T::zero());
    for ci in 0..cin {
        let in_plane = &input[ci * h * w..(ci + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let row = ((ci * kh + u) * kw + v) * tile_pos;
                for y_out in r0..r1 {
                    let y_in = (y_out * stride + u) as isize - padding as isize;
                    if y_in < 0 || y_in >= h as isize {
                        continue;
                    }
                    let in_row = &in_plane[y_in as usize * w..(y_in as usize + 1) * w];
                    let dst = &mut col[row + (y_out - r0) * wout..row + (y_out - r0 + 1) * wout];
                    if stride == 1 {
                        // x_in = x_out + v - padding
                        let lo = padding.saturating_sub(v);
                        let hi = (w + padding - v).min(wout);
                        if lo < hi {
                            let src0 = lo + v - padding;
                            dst[lo..hi].copy_from_slice(&in_row[src0..src0 + (hi - lo)]);
                        }
                    } else {
                        for (x_out, d) in dst.iter_mut().enumerate() {
                            let x_in = (x_out * stride + v) as isize - padding as isize;
                            if x_in >= 0 && x_in < w as isize {
                                *d = in_row[x_in as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `weight` is (Cout, Cin, kh, kw); `bias`, when
/// present, is a per-channel vector (1, Cout, 1, 1).
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let ish = input.shape();
    let wsh = weight.shape();
    let (cout, cin, kh, kw) = (wsh.n, wsh.c, wsh.h, wsh.w);
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if ish.c != cin {
        return Err(Error::ChannelMismatch {
            expected: cin,
            got: ish.c,
            context: "conv2d input".into(),
        });
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::ChannelMismatch {
                expected: cout,
                got: b.numel(),
                context: "conv2d bias".into(),
            });
        }
    }
    let hout = conv_out_extent(ish.h, padding, kh, stride);
    let wout = conv_out_extent(ish.w, padding, kw, stride);
    let (hout, wout) = match (hout, wout) {
        (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
        _ => {
            return Err(Error::EmptyOutput {
                op: "conv2d".into(),
                detail: format!(
                    "input {}x{} pad {} kernel {}x{} stride {}",
                    ish.h, ish.w, padding, kh, kw, stride
                ),
            })
        }
    };

    let k = cin * kh * kw;
    let th = tile_height(k, wout, hout);
    let mut tasks = Vec::new();
    for n in 0..ish.n {
        let mut r0 = 0;
        while r0 < hout {
            let r1 = (r0 + th).min(hout);
            tasks.push((n, r0, r1));
            r0 = r1;
        }
    }

    let w_mat = ArrayView2::from_shape((cout, k), weight.as_slice()).expect("weight layout");
    let in_data = input.as_slice();
    let chw = ish.c * ish.h * ish.w;

    // Each task yields its own (cout x tile_pos) block; blocks are written
    // back sequentially so the result does not depend on scheduling.
    let blocks: Vec<Vec<T>> = tasks
        .par_iter()
        .map(|&(n, r0, r1)| {
            let tile_pos = (r1 - r0) * wout;
            let mut col = vec![T::zero(); k * tile_pos];
            im2col_tile(
                &in_data[n * chw..(n + 1) * chw],
                cin,
                ish.h,
                ish.w,
                kh,
                kw,
                stride,
                padding,
                wout,
                r0,
                r1,
                &mut col,
            );
            let col_mat = ArrayView2::from_shape((k, tile_pos), &col[..]).unwrap();
            let mut out = vec![T::zero(); cout * tile_pos];
            {
                let mut out_mat = ArrayViewMut2::from_shape((cout, tile_pos), &mut out[..]).unwrap();
                general_mat_mul(T::one(), &w_mat, &col_mat, T::zero(), &mut out_mat);
            }
            out
        })
        .collect();

    let mut out = Tensor::zeros(Shape::new(ish.n, cout, hout, wout));
    for (&(n, r0, r1), block) in tasks.iter().zip(&blocks) {
        let tile_pos = (r1 - r0) * wout;
        for co in 0..cout {
            let b = bias.map(|b| b.as_slice()[co]).unwrap_or_else(T::zero);
            let src = &block[co * tile_pos..(co + 1) * tile_pos];
            let dst_start = out.index(n, co, r0, 0);
            let dst = &mut out.as_mut_slice()[dst_start..dst_start + tile_pos];
            if b == T::zero() {
                dst.copy_from_slice(src);
            } else {
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d = x + b;
                }
            }
        }
    }
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Scatter the adjoint GEMM output into the target grid. `wt_rows` must be the
/// (kh*kw x c_src) weight block for one target channel; the caller loops
/// target channels in parallel, so each invocation owns its output plane.
#[allow(clippy::too_many_arguments)]
fn scatter_channel<T: Scalar>(
    colblk: &[T], // (kh*kw) x tile_pos
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    w_src: usize,
    r0: usize,
    r1: usize,
    h_t: usize,
    w_t: usize,
    out_plane: &mut [T],
) {
    let tile_pos = (r1 - r0) * w_src;
    for u in 0..kh {
        for v in 0..kw {
            let row = &colblk[(u * kw + v) * tile_pos..(u * kw + v + 1) * tile_pos];
            for y_src in r0..r1 {
                let y_t = (y_src * stride + u) as isize - padding as isize;
                if y_t < 0 || y_t >= h_t as isize {
                    continue;
                }
                let out_row = &mut out_plane[y_t as usize * w_t..(y_t as usize + 1) * w_t];
                let src_row = &row[(y_src - r0) * w_src..(y_src - r0 + 1) * w_src];
                for (x_src, &g) in src_row.iter().enumerate() {
                    let x_t = (x_src * stride + v) as isize - padding as isize;
                    if x_t >= 0 && (x_t as usize) < w_t {
                        out_row[x_t as usize] += g;
                    }
                }
            }
        }
    }
}

/// Core of the transposed direction: out[n, c_t] += scatter(Wt_block^T . src).
/// `w_t_mat` is (c_src, c_t*kh*kw) row-major; target extents are explicit so
/// conv input-gradients can cover rows the strided forward never consumed.
#[allow(clippy::too_many_arguments)]
fn col2im_apply<T: Scalar>(
    src: &Tensor<T>,
    w_t_mat: ArrayView2<T>,
    c_t: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_t: usize,
    w_t: usize,
    bias: Option<&Tensor<T>>,
    op: &str,
) -> Result<Tensor<T>> {
    let ssh = src.shape();
    let c_src = ssh.c;
    let khkw = kh * kw;
    let mut out = Tensor::zeros(Shape::new(ssh.n, c_t, h_t, w_t));

    let th = tile_height(c_t * khkw, ssh.w, ssh.h);
    let src_data = src.as_slice();
    let chw_src = c_src * ssh.h * ssh.w;
    let w_trans = w_t_mat.t(); // (c_t*kh*kw, c_src)

    for n in 0..ssh.n {
        let n_src = &src_data[n * chw_src..(n + 1) * chw_src];
        let out_offset = n * c_t * h_t * w_t;
        let out_planes = &mut out.as_mut_slice()[out_offset..out_offset + c_t * h_t * w_t];
        let mut r0 = 0;
        while r0 < ssh.h {
            let r1 = (r0 + th).min(ssh.h);
            let tile_pos = (r1 - r0) * ssh.w;
            // (c_src x tile_pos) view over the source rows of this tile.
            let src_mat = ArrayView2::from_shape(
                (c_src, tile_pos).strides((ssh.h * ssh.w, 1)),
                &n_src[r0 * ssh.w..(c_src - 1) * ssh.h * ssh.w + r1 * ssh.w],
            )
            .expect("src view");
            out_planes
                .par_chunks_mut(h_t * w_t)
                .enumerate()
                .for_each(|(ct, plane)| {
                    let wblk = w_trans.slice(s![ct * khkw..(ct + 1) * khkw, ..]);
                    let mut colblk = vec![T::zero(); khkw * tile_pos];
                    {
                        let mut cb =
                            ArrayViewMut2::from_shape((khkw, tile_pos), &mut colblk[..]).unwrap();
                        general_mat_mul(T::one(), &wblk, &src_mat, T::zero(), &mut cb);
                    }
                    scatter_channel(
                        &colblk, kh, kw, stride, padding, ssh.w, r0, r1, h_t, w_t, plane,
                    );
                });
            r0 = r1;
        }
    }

    if let Some(b) = bias {
        if b.numel() != c_t {
            return Err(Error::ChannelMismatch {
                expected: c_t,
                got: b.numel(),
                context: format!("{op} bias"),
            });
        }
        let hw = h_t * w_t;
        for n in 0..ssh.n {
            for ct in 0..c_t {
                let bv = b.as_slice()[ct];
                let start = (n * c_t + ct) * hw;
                for x in &mut out.as_mut_slice()[start..start + hw] {
                    *x += bv;
                }
            }
        }
    }
    out.ensure_finite(op)?;
    Ok(out)
}

/// Transposed convolution: the adjoint of [`conv2d`] with respect to its
/// input. `weight` is (Cin, Cout, kh, kw); output spatial extent is
/// (H-1)*stride - 2*padding + kernel.
pub fn transposed_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let ish = input.shape();
    let wsh = weight.shape();
    let (cin, cout, kh, kw) = (wsh.n, wsh.c, wsh.h, wsh.w);
    if stride == 0 {
        return Err(Error::invalid("transposed_conv2d", "stride must be positive"));
    }
    if ish.c != cin {
        return Err(Error::ChannelMismatch {
            expected: cin,
            got: ish.c,
            context: "transposed_conv2d input".into(),
        });
    }
    let hout = tconv_out_extent(ish.h, padding, kh, stride);
    let wout = tconv_out_extent(ish.w, padding, kw, stride);
    let (hout, wout) = match (hout, wout) {
        (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
        _ => {
            return Err(Error::EmptyOutput {
                op: "transposed_conv2d".into(),
                detail: format!(
                    "input {}x{} pad {} kernel {}x{} stride {}",
                    ish.h, ish.w, padding, kh, kw, stride
                ),
            })
        }
    };
    let w_mat =
        ArrayView2::from_shape((cin, cout * kh * kw), weight.as_slice()).expect("weight layout");
    col2im_apply(
        input,
        w_mat,
        cout,
        kh,
        kw,
        stride,
        padding,
        hout,
        wout,
        bias,
        "transposed_conv2d",
    )
}

/// Weight gradient shared by both convolution directions:
/// dW[co, ci, u, v] = sum_n,y,x grad[n, co, y, x] * input[n, ci, y*s+u-p, x*s+v-p].
fn conv_weight_grad<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let ish = input.shape();
    let gsh = grad_out.shape();
    let (cin, cout) = (ish.c, gsh.c);
    let k = cin * kh * kw;
    let th = tile_height(k, gsh.w, gsh.h);
    let chw_in = ish.c * ish.h * ish.w;

    // Per-batch partial sums, reduced in batch order afterwards.
    let partials: Vec<Vec<T>> = (0..ish.n)
        .into_par_iter()
        .map(|n| {
            let mut dw = vec![T::zero(); cout * k];
            let mut r0 = 0;
            while r0 < gsh.h {
                let r1 = (r0 + th).min(gsh.h);
                let tile_pos = (r1 - r0) * gsh.w;
                let mut col = vec![T::zero(); k * tile_pos];
                im2col_tile(
                    &input.as_slice()[n * chw_in..(n + 1) * chw_in],
                    cin,
                    ish.h,
                    ish.w,
                    kh,
                    kw,
                    stride,
                    padding,
                    gsh.w,
                    r0,
                    r1,
                    &mut col,
                );
                let col_mat = ArrayView2::from_shape((k, tile_pos), &col[..]).unwrap();
                let g_start = grad_out.index(n, 0, r0, 0);
                let g_end = grad_out.index(n, cout - 1, r1 - 1, gsh.w - 1) + 1;
                let g_mat = ArrayView2::from_shape(
                    (cout, tile_pos).strides((gsh.h * gsh.w, 1)),
                    &grad_out.as_slice()[g_start..g_end],
                )
                .expect("grad view");
                let mut dw_mat = ArrayViewMut2::from_shape((cout, k), &mut dw[..]).unwrap();
                general_mat_mul(T::one(), &g_mat, &col_mat.t(), T::one(), &mut dw_mat);
                r0 = r1;
            }
            dw
        })
        .collect();

    let mut total = vec![T::zero(); cout * k];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    Tensor::from_vec(Shape::new(cout, cin, kh, kw), total).expect("dw shape")
}

fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let sh = t.shape();
    let sums: Vec<T> = (0..sh.c)
        .into_par_iter()
        .map(|c| {
            let mut acc = T::zero();
            for n in 0..sh.n {
                for &v in t.plane(n, c) {
                    acc += v;
                }
            }
            acc
        })
        .collect();
    Tensor::channel_vec(sums)
}

/// Reverse-mode gradients for [`conv2d`].
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let ish = input.shape();
    let wsh = weight.shape();
    let (cout, cin, kh, kw) = (wsh.n, wsh.c, wsh.h, wsh.w);
    // d/d_input: adjoint map, scattered back onto the exact input extent.
    let w_mat =
        ArrayView2::from_shape((cout, cin * kh * kw), weight.as_slice()).expect("weight layout");
    let grad_input = col2im_apply(
        grad_out,
        w_mat,
        cin,
        kh,
        kw,
        stride,
        padding,
        ish.h,
        ish.w,
        None,
        "conv2d_backward",
    )?;
    let grad_weight = conv_weight_grad(input, grad_out, kh, kw, stride, padding);
    grad_weight.ensure_finite("conv2d_backward")?;
    let grad_bias = has_bias.then(|| channel_sums(grad_out));
    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

/// Reverse-mode gradients for [`transposed_conv2d`].
pub fn transposed_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>> {
    // The adjoint of an adjoint is the forward map: d/d_input is a plain
    // cross-correlation of grad_out with the same kernel.
    let grad_input = conv2d(grad_out, weight, None, stride, padding)?;
    if grad_input.shape() != input.shape() {
        return Err(Error::ShapeMismatch(format!(
            "transposed_conv2d_backward input grad {} vs input {}",
            grad_input.shape(),
            input.shape()
        )));
    }
    let wsh = weight.shape();
    // Same bilinear form as the conv weight gradient with the roles of the
    // two activations swapped; lands directly in (Cin, Cout, kh, kw) layout.
    let grad_weight = conv_weight_grad(grad_out, input, wsh.h, wsh.w, stride, padding);
    grad_weight.ensure_finite("transposed_conv2d_backward")?;
    let grad_bias = has_bias.then(|| channel_sums(grad_out));
    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3), data).unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = t((1, 1, 3, 3), (1..=9).map(|v| v as f64).collect());
        let w = t((1, 1, 1, 1), vec![1.0]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_3x3_sums_to_nine() {
        let x = t((1, 1, 3, 3), vec![1.0; 9]);
        let w = t((1, 1, 3, 3), vec![1.0; 9]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape().dims(), [1, 1, 1, 1]);
        assert_eq!(y.as_slice()[0], 9.0);
    }

    #[test]
    fn strided_shape_matches_formula() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 512, 1024));
        let w = Tensor::<f32>::zeros(Shape::new(32, 3, 3, 3));
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape().dims(), [1, 32, 256, 512]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 4, 8, 8));
        let w = Tensor::<f32>::zeros(Shape::new(2, 3, 3, 3));
        assert!(matches!(
            conv2d(&x, &w, None, 1, 1),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_an_error() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let w = Tensor::<f32>::zeros(Shape::new(1, 1, 5, 5));
        assert!(matches!(
            conv2d(&x, &w, None, 1, 0),
            Err(Error::EmptyOutput { .. })
        ));
    }

    #[test]
    fn tconv_expands_single_pixel() {
        let x = t((1, 1, 1, 1), vec![3.5]);
        let w = t((1, 1, 2, 2), vec![1.0; 4]);
        let y = transposed_conv2d(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.shape().dims(), [1, 1, 2, 2]);
        assert!(y.as_slice().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn tconv_shape_matches_formula() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 128, 128, 256));
        let w = Tensor::<f32>::zeros(Shape::new(128, 19, 8, 8));
        let y = transposed_conv2d(&x, &w, None, 4, 2).unwrap();
        assert_eq!(y.shape().dims(), [1, 19, 512, 1024]);
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = t((1, 1, 2, 2), vec![0.0; 4]);
        let w = t((2, 1, 1, 1), vec![1.0, 1.0]);
        let b = Tensor::channel_vec(vec![0.5, -1.5]);
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.plane(0, 0), &[0.5; 4]);
        assert_eq!(y.plane(0, 1), &[-1.5; 4]);
    }

    #[test]
    fn nan_input_is_rejected() {
        let mut x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        x.as_mut_slice()[0] = f32::NAN;
        let w = Tensor::<f32>::filled(Shape::new(1, 1, 1, 1), 1.0);
        assert!(matches!(
            conv2d(&x, &w, None, 1, 0),
            Err(Error::NonFinite { .. })
        ));
    }
}
