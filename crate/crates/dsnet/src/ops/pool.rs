//! Spatial pooling.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

/// Forward pooling output plus what the backward pass needs: argmax positions
/// (flat input indices) in max mode.
pub struct PoolOut<T> {
    pub output: Tensor<T>,
    pub argmax: Option<Vec<u32>>,
}

pub fn pool2d<T: Scalar>(
    input: &Tensor<T>,
    mode: PoolMode,
    kernel: usize,
    stride: usize,
) -> Result<PoolOut<T>> {
    let ish = input.shape();
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid("pool2d", "kernel and stride must be positive"));
    }
    if kernel > ish.h || kernel > ish.w {
        return Err(Error::invalid(
            "pool2d",
            format!("kernel {} exceeds input {}x{}", kernel, ish.h, ish.w),
        ));
    }
    let hout = (ish.h - kernel) / stride + 1;
    let wout = (ish.w - kernel) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(ish.n, ish.c, hout, wout));
    let mut argmax = matches!(mode, PoolMode::Max).then(|| vec![0u32; out.numel()]);

    let hw_in = ish.h * ish.w;
    let hw_out = hout * wout;
    let inv_area = T::from_f64(1.0 / (kernel * kernel) as f64);
    let in_data = input.as_slice();

    let mut arg_chunks: Vec<Option<&mut [u32]>> = match &mut argmax {
        Some(a) => a.chunks_mut(hw_out).map(Some).collect(),
        None => (0..ish.n * ish.c).map(|_| None).collect(),
    };
    out.as_mut_slice()
        .par_chunks_mut(hw_out)
        .zip(arg_chunks.par_iter_mut())
        .enumerate()
        .for_each(|(plane_idx, (out_plane, arg_plane))| {
            let in_plane = &in_data[plane_idx * hw_in..(plane_idx + 1) * hw_in];
            for oy in 0..hout {
                for ox in 0..wout {
                    let (y0, x0) = (oy * stride, ox * stride);
                    match mode {
                        PoolMode::Avg => {
                            let mut acc = T::zero();
                            for dy in 0..kernel {
                                for dx in 0..kernel {
                                    acc += in_plane[(y0 + dy) * ish.w + x0 + dx];
                                }
                            }
                            out_plane[oy * wout + ox] = acc * inv_area;
                        }
                        PoolMode::Max => {
                            let mut best = in_plane[y0 * ish.w + x0];
                            let mut best_idx = y0 * ish.w + x0;
                            for dy in 0..kernel {
                                for dx in 0..kernel {
                                    let idx = (y0 + dy) * ish.w + x0 + dx;
                                    if in_plane[idx] > best {
                                        best = in_plane[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out_plane[oy * wout + ox] = best;
                            if let Some(a) = arg_plane {
                                a[oy * wout + ox] = (plane_idx * hw_in + best_idx) as u32;
                            }
                        }
                    }
                }
            }
        });
    out.ensure_finite("pool2d")?;
    Ok(PoolOut {
        output: out,
        argmax,
    })
}

pub fn pool2d_backward<T: Scalar>(
    input_shape: Shape,
    mode: PoolMode,
    kernel: usize,
    stride: usize,
    argmax: Option<&[u32]>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let gsh = grad_out.shape();
    let mut grad_in = Tensor::zeros(input_shape);
    let hw_in = input_shape.h * input_shape.w;
    let hw_out = gsh.h * gsh.w;
    let g = grad_out.as_slice();
    match mode {
        PoolMode::Max => {
            let argmax = argmax.ok_or_else(|| Error::invalid("pool2d_backward", "missing argmax"))?;
            grad_in
                .as_mut_slice()
                .par_chunks_mut(hw_in)
                .enumerate()
                .for_each(|(plane_idx, gi)| {
                    let base = plane_idx * hw_in;
                    for o in 0..hw_out {
                        let flat = argmax[plane_idx * hw_out + o] as usize;
                        gi[flat - base] += g[plane_idx * hw_out + o];
                    }
                });
        }
        PoolMode::Avg => {
            let inv_area = T::from_f64(1.0 / (kernel * kernel) as f64);
            grad_in
                .as_mut_slice()
                .par_chunks_mut(hw_in)
                .enumerate()
                .for_each(|(plane_idx, gi)| {
                    for oy in 0..gsh.h {
                        for ox in 0..gsh.w {
                            let go = g[plane_idx * hw_out + oy * gsh.w + ox] * inv_area;
                            for dy in 0..kernel {
                                for dx in 0..kernel {
                                    gi[(oy * stride + dy) * input_shape.w + ox * stride + dx] += go;
                                }
                            }
                        }
                    }
                });
        }
    }
    Ok(grad_in)
}

/// Spatial mean per channel, output (N, C, 1, 1).
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let ish = input.shape();
    if ish.h == 0 || ish.w == 0 {
        return Err(Error::EmptyOutput {
            op: "global_avg_pool".into(),
            detail: "empty spatial extent".into(),
        });
    }
    let inv = T::from_f64(1.0 / (ish.h * ish.w) as f64);
    let mut out = Tensor::zeros(Shape::new(ish.n, ish.c, 1, 1));
    for n in 0..ish.n {
        for c in 0..ish.c {
            let mut acc = T::zero();
            for &v in input.plane(n, c) {
                acc += v;
            }
            out.set(n, c, 0, 0, acc * inv);
        }
    }
    out.ensure_finite("global_avg_pool")?;
    Ok(out)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: Shape,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let inv = T::from_f64(1.0 / (input_shape.h * input_shape.w) as f64);
    let mut grad_in = Tensor::zeros(input_shape);
    for n in 0..input_shape.n {
        for c in 0..input_shape.c {
            let g = grad_out.at(n, c, 0, 0) * inv;
            for v in grad_in.plane_mut(n, c) {
                *v = g;
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerated_2x2_window() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let avg = pool2d(&x, PoolMode::Avg, 2, 2).unwrap().output;
        assert_eq!(avg.as_slice(), &[2.5]);
        let max = pool2d(&x, PoolMode::Max, 2, 2).unwrap().output;
        assert_eq!(max.as_slice(), &[4.0]);
    }

    #[test]
    fn constant_input_invariant_both_modes() {
        let x = Tensor::<f64>::filled(Shape::new(2, 3, 4, 4), 7.25);
        for mode in [PoolMode::Avg, PoolMode::Max] {
            let y = pool2d(&x, mode, 2, 2).unwrap().output;
            assert!(y.as_slice().iter().all(|&v| v == 7.25));
        }
    }

    #[test]
    fn shape_formula() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 96, 256, 512));
        let y = pool2d(&x, PoolMode::Avg, 2, 2).unwrap().output;
        assert_eq!(y.shape().dims(), [1, 96, 128, 256]);
    }

    #[test]
    fn oversized_kernel_is_an_error() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3));
        assert!(pool2d(&x, PoolMode::Max, 4, 1).is_err());
    }

    #[test]
    fn global_avg_pool_means_channels() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape().dims(), [1, 1, 1, 1]);
        assert_eq!(y.as_slice(), &[1.5]);
    }

    #[test]
    fn global_avg_pool_shape_contract() {
        let x = Tensor::<f32>::zeros(Shape::new(4, 494, 16, 32));
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape().dims(), [4, 494, 1, 1]);
    }

    #[test]
    fn max_backward_routes_to_argmax() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 5.0, 3.0, 4.0]).unwrap();
        let fwd = pool2d(&x, PoolMode::Max, 2, 2).unwrap();
        let g = Tensor::filled(Shape::new(1, 1, 1, 1), 2.0);
        let gi = pool2d_backward(x.shape(), PoolMode::Max, 2, 2, fwd.argmax.as_deref(), &g).unwrap();
        assert_eq!(gi.as_slice(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
