//! Convolution and transposed convolution via im2col + GEMM.
//!
//! Layouts: conv kernels are `(out_ch, in_ch, kh, kw)`, transposed-conv
//! kernels are `(in_ch, out_ch, kh, kw)`. Both use zero padding.

use super::{Result, Scalar, Tensor4, TensorError};

/// `(in + 2 * pad - k) / stride + 1`, or `None` when non-positive.
pub fn conv_output_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// `(in - 1) * stride - 2 * pad + k`, or `None` when non-positive.
pub fn deconv_output_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if input == 0 || stride == 0 {
        return None;
    }
    let full = (input - 1) * stride + k;
    if full <= 2 * pad {
        return None;
    }
    Some(full - 2 * pad)
}

/// Geometry of one sliding-window pass: an "image" of `c x h x w` scanned by
/// a `kh x kw` window producing `oh x ow` positions.
#[derive(Debug, Clone, Copy)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate touched by output position `o` at kernel offset `k`.
    #[inline]
    fn src(&self, o: usize, k: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        if p < 0 {
            None
        } else {
            Some(p as usize)
        }
    }

    /// Output columns `[lo, hi)` whose source column `oj * stride + kj - pad`
    /// lands inside the image.
    #[inline]
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if kj >= self.pad {
            0
        } else {
            (self.pad - kj).div_ceil(self.stride)
        };
        // largest oj with oj * stride + kj - pad <= w - 1
        let limit = self.w + self.pad;
        let hi = if limit <= kj {
            0
        } else {
            ((limit - kj - 1) / self.stride + 1).min(self.ow)
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let ncols = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = self.valid_cols(kj);
                    for oi in 0..self.oh {
                        let line = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        match self.src(oi, ki) {
                            Some(y) if y < self.h && lo < hi => {
                                let src = &img[(c * self.h + y) * self.w..][..self.w];
                                line[..lo].fill(T::zero());
                                line[hi..].fill(T::zero());
                                let x0 = lo * self.stride + kj - self.pad;
                                if self.stride == 1 {
                                    line[lo..hi].copy_from_slice(&src[x0..x0 + (hi - lo)]);
                                } else {
                                    for (i, v) in line[lo..hi].iter_mut().enumerate() {
                                        *v = src[x0 + i * self.stride];
                                    }
                                }
                            }
                            _ => line.fill(T::zero()),
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds columns back into an image (adjoint of `im2col`).
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let ncols = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = self.valid_cols(kj);
                    if lo >= hi {
                        continue;
                    }
                    let x0 = lo * self.stride + kj - self.pad;
                    for oi in 0..self.oh {
                        let Some(y) = self.src(oi, ki).filter(|&y| y < self.h) else {
                            continue;
                        };
                        let dst = &mut img[(c * self.h + y) * self.w..][..self.w];
                        let line = &src[oi * self.ow + lo..oi * self.ow + hi];
                        if self.stride == 1 {
                            for (d, &v) in dst[x0..x0 + line.len()].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (i, &v) in line.iter().enumerate() {
                                dst[x0 + i * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution-like operator.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub kernel: Tensor4<T>,
    pub bias: Vec<T>,
}

fn conv_window<T: Scalar>(
    op: &'static str,
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    stride: usize,
    pad: usize,
) -> Result<Window> {
    let [_, c, h, w] = input.shape();
    let [_, kc, kh, kw] = kernel.shape();
    if c != kc {
        return Err(TensorError::Dimension {
            op,
            left: input.shape(),
            right: kernel.shape(),
        });
    }
    let (Some(oh), Some(ow)) = (conv_output_dim(h, kh, stride, pad), conv_output_dim(w, kw, stride, pad)) else {
        return Err(TensorError::EmptyOutput {
            op,
            input: input.shape(),
        });
    };
    Ok(Window {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    })
}

fn check_bias<T>(op: &'static str, bias: Option<&[T]>, channels: usize, kshape: [usize; 4]) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(TensorError::Dimension {
            op,
            left: [1, b.len(), 1, 1],
            right: kshape,
        }),
        _ => Ok(()),
    }
}

/// Discrete cross-correlation plus optional per-output-channel bias.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>> {
    let win = conv_window("conv2d", input, kernel, stride, pad)?;
    let out_ch = kernel.shape()[0];
    check_bias("conv2d", bias, out_ch, kernel.shape())?;
    let n = input.batch();
    let (k, p) = (win.rows(), win.cols());
    let mut out = Tensor4::zeros([n, out_ch, win.oh, win.ow]);
    let mut cols = vec![T::zero(); k * p];
    for b in 0..n {
        win.im2col(input.item(b), &mut cols);
        let dst = &mut out.data_mut()[b * out_ch * p..(b + 1) * out_ch * p];
        if let Some(bias) = bias {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            out_ch,
            k,
            p,
            kernel.data(),
            k as isize,
            1,
            &cols,
            p as isize,
            1,
            beta,
            dst,
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] given the upstream gradient.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let win = conv_window("conv2d_backward", input, kernel, stride, pad)?;
    let out_ch = kernel.shape()[0];
    let n = input.batch();
    let expect = [n, out_ch, win.oh, win.ow];
    if grad_out.shape() != expect {
        return Err(TensorError::Dimension {
            op: "conv2d_backward",
            left: grad_out.shape(),
            right: expect,
        });
    }
    let (k, p) = (win.rows(), win.cols());
    let mut gk = Tensor4::zeros(kernel.shape());
    let mut gb = vec![T::zero(); out_ch];
    let mut gi = Tensor4::zeros(if need_input { input.shape() } else { [0, 0, 0, 0] });
    let mut cols = vec![T::zero(); k * p];
    let item = win.c * win.h * win.w;
    for b in 0..n {
        let dy = grad_out.item(b);
        for (o, row) in dy.chunks(p).enumerate() {
            gb[o] += row.iter().copied().sum::<T>();
        }
        win.im2col(input.item(b), &mut cols);
        // dK (O x K) += dY (O x P) * cols^T (P x K)
        T::gemm(
            out_ch,
            p,
            k,
            dy,
            p as isize,
            1,
            &cols,
            1,
            p as isize,
            T::one(),
            gk.data_mut(),
        );
        if need_input {
            // dcols (K x P) = K^T (K x O) * dY (O x P)
            T::gemm(
                k,
                out_ch,
                p,
                kernel.data(),
                1,
                k as isize,
                dy,
                p as isize,
                1,
                T::zero(),
                &mut cols,
            );
            win.col2im(&cols, &mut gi.data_mut()[b * item..(b + 1) * item]);
        }
    }
    Ok(ConvGrads {
        input: gi,
        kernel: gk,
        bias: gb,
    })
}

fn deconv_window<T: Scalar>(
    op: &'static str,
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    stride: usize,
    pad: usize,
) -> Result<Window> {
    let [_, c, h, w] = input.shape();
    let [kin, kout, kh, kw] = kernel.shape();
    if c != kin {
        return Err(TensorError::Dimension {
            op,
            left: input.shape(),
            right: kernel.shape(),
        });
    }
    let (Some(oh), Some(ow)) = (
        deconv_output_dim(h, kh, stride, pad),
        deconv_output_dim(w, kw, stride, pad),
    ) else {
        return Err(TensorError::EmptyOutput {
            op,
            input: input.shape(),
        });
    };
    // The window scans the *output* image; its positions are the input pixels.
    Ok(Window {
        c: kout,
        h: oh,
        w: ow,
        kh,
        kw,
        stride,
        pad,
        oh: h,
        ow: w,
    })
}

/// Transposed convolution (the adjoint of [`conv2d_forward`] with the same
/// kernel tensor), plus optional per-output-channel bias.
pub fn deconv2d_forward<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>> {
    let win = deconv_window("deconv2d", input, kernel, stride, pad)?;
    let [in_ch, out_ch, _, _] = kernel.shape();
    check_bias("deconv2d", bias, out_ch, kernel.shape())?;
    let n = input.batch();
    let (k, p) = (win.rows(), win.cols());
    let plane = win.h * win.w;
    let mut out = Tensor4::zeros([n, out_ch, win.h, win.w]);
    let mut cols = vec![T::zero(); k * p];
    for b in 0..n {
        // cols (K' x P) = W^T (K' x I) * x (I x P)
        T::gemm(
            k,
            in_ch,
            p,
            kernel.data(),
            1,
            k as isize,
            input.item(b),
            p as isize,
            1,
            T::zero(),
            &mut cols,
        );
        let dst = &mut out.data_mut()[b * out_ch * plane..(b + 1) * out_ch * plane];
        if let Some(bias) = bias {
            for (o, ch) in dst.chunks_mut(plane).enumerate() {
                ch.iter_mut().for_each(|v| *v = bias[o]);
            }
        }
        win.col2im(&cols, dst);
    }
    Ok(out)
}

/// Gradients of [`deconv2d_forward`] given the upstream gradient.
pub fn deconv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let win = deconv_window("deconv2d_backward", input, kernel, stride, pad)?;
    let [in_ch, out_ch, _, _] = kernel.shape();
    let n = input.batch();
    let expect = [n, out_ch, win.h, win.w];
    if grad_out.shape() != expect {
        return Err(TensorError::Dimension {
            op: "deconv2d_backward",
            left: grad_out.shape(),
            right: expect,
        });
    }
    let (k, p) = (win.rows(), win.cols());
    let plane = win.h * win.w;
    let mut gk = Tensor4::zeros(kernel.shape());
    let mut gb = vec![T::zero(); out_ch];
    let mut gi = Tensor4::zeros(if need_input { input.shape() } else { [0, 0, 0, 0] });
    let mut cols = vec![T::zero(); k * p];
    for b in 0..n {
        let dy = grad_out.item(b);
        for (o, ch) in dy.chunks(plane).enumerate() {
            gb[o] += ch.iter().copied().sum::<T>();
        }
        win.im2col(dy, &mut cols);
        // dW (I x K') += x (I x P) * cols^T (P x K')
        T::gemm(
            in_ch,
            p,
            k,
            input.item(b),
            p as isize,
            1,
            &cols,
            1,
            p as isize,
            T::one(),
            gk.data_mut(),
        );
        if need_input {
            // dx (I x P) = W (I x K') * cols (K' x P)
            let dst = &mut gi.data_mut()[b * in_ch * p..(b + 1) * in_ch * p];
            T::gemm(
                in_ch,
                k,
                p,
                kernel.data(),
                k as isize,
                1,
                &cols,
                p as isize,
                1,
                T::zero(),
                dst,
            );
        }
    }
    Ok(ConvGrads {
        input: gi,
        kernel: gk,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor4::filled([1, 1, 3, 3], 1.0f64);
        let k = Tensor4::filled([1, 1, 3, 3], 1.0f64);
        let y = conv2d_forward(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let x = Tensor4::from_vec([1, 1, 4, 5], (0..20).map(|v| v as f64 * 0.5 - 3.0).collect()).unwrap();
        let mut k = Tensor4::zeros([1, 1, 3, 3]);
        k.set(0, 0, 1, 1, 1.0);
        let y = conv2d_forward(&x, &k, None, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_pixel_deconv_scatters_kernel() {
        let x = Tensor4::from_vec([1, 1, 1, 1], vec![2.5f64]).unwrap();
        let k = Tensor4::from_vec([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let y = deconv2d_forward(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        let expect: Vec<f64> = k.data().iter().map(|v| v * 2.5).collect();
        assert_eq!(y.data(), expect.as_slice());
    }

    #[test]
    fn conv_then_deconv_restores_shape() {
        assert_eq!(conv_output_dim(55, 5, 1, 0), Some(51));
        assert_eq!(deconv_output_dim(51, 5, 1, 0), Some(55));
        let x = Tensor4::filled([1, 1, 55, 55], 0.5f32);
        let k = Tensor4::filled([2, 1, 5, 5], 0.01f32);
        let y = conv2d_forward(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 2, 51, 51]);
        let kt = Tensor4::filled([2, 1, 5, 5], 0.01f32);
        let z = deconv2d_forward(&y, &kt, None, 1, 0).unwrap();
        assert_eq!(z.shape(), [1, 1, 55, 55]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor4::<f64>::zeros([1, 2, 5, 5]);
        let k = Tensor4::<f64>::zeros([1, 3, 3, 3]);
        let err = conv2d_forward(&x, &k, None, 1, 0).unwrap_err();
        assert_eq!(
            err,
            TensorError::Dimension {
                op: "conv2d",
                left: [1, 2, 5, 5],
                right: [1, 3, 3, 3]
            }
        );
        assert!(err.to_string().contains("[1, 2, 5, 5]"));
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let x = Tensor4::<f64>::zeros([1, 1, 3, 3]);
        let k = Tensor4::<f64>::zeros([1, 1, 5, 5]);
        assert!(matches!(
            conv2d_forward(&x, &k, None, 1, 0),
            Err(TensorError::EmptyOutput { .. })
        ));
    }

    #[test]
    fn bias_is_added_per_output_channel() {
        let x = Tensor4::<f64>::zeros([1, 1, 4, 4]);
        let k = Tensor4::<f64>::zeros([2, 1, 3, 3]);
        let y = conv2d_forward(&x, &k, Some(&[1.0, -2.0]), 1, 0).unwrap();
        assert!(y.item(0)[..4].iter().all(|&v| v == 1.0));
        assert!(y.item(0)[4..].iter().all(|&v| v == -2.0));
    }
}
