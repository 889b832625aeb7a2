use crate::error::{check_dim, Error, Result};

use super::{KernelBank, Real, Tensor3};

/// Output extent of a zero-padded convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Output positions `o` along one axis for which `o·stride + k − padding`
/// lands inside the input, as a half-open range.
#[inline]
fn valid_range(k: usize, padding: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let hi = if input + padding > k {
        output.min((input - 1 + padding - k) / stride + 1)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn check_geometry<T: Real>(
    input: &Tensor3<T>,
    kernels: &KernelBank<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    check_dim("conv2d", "input channels", kernels.in_channels(), input.channels())?;
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be at least 1"));
    }
    let padded_h = input.height() + 2 * padding;
    let padded_w = input.width() + 2 * padding;
    if kernels.kernel_height() > padded_h || kernels.kernel_height() == 0 {
        return Err(Error::Shape {
            context: "conv2d",
            axis: "kernel height",
            expected: padded_h,
            found: kernels.kernel_height(),
        });
    }
    if kernels.kernel_width() > padded_w || kernels.kernel_width() == 0 {
        return Err(Error::Shape {
            context: "conv2d",
            axis: "kernel width",
            expected: padded_w,
            found: kernels.kernel_width(),
        });
    }
    Ok((
        conv_output_len(input.height(), kernels.kernel_height(), stride, padding),
        conv_output_len(input.width(), kernels.kernel_width(), stride, padding),
    ))
}

/// Zero-padded 2-D cross-correlation (no bias, no dilation).
pub fn conv2d_forward<T: Real>(
    input: &Tensor3<T>,
    kernels: &KernelBank<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor3<T>> {
    let (oh, ow) = check_geometry(input, kernels, stride, padding)?;
    let (ci, h, w) = input.shape();
    let [co, _, kh, kw] = kernels.dims();
    let mut out = Tensor3::zeros(co, oh, ow);
    let kdata = kernels.data();

    for o in 0..co {
        let out_plane = out.plane_mut(o);
        for i in 0..ci {
            let in_plane = input.plane(i);
            for ky in 0..kh {
                let (y_lo, y_hi) = valid_range(ky, padding, stride, h, oh);
                for kx in 0..kw {
                    let wv = kdata[((o * ci + i) * kh + ky) * kw + kx];
                    let (x_lo, x_hi) = valid_range(kx, padding, stride, w, ow);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for oy in y_lo..y_hi {
                        let iy = oy * stride + ky - padding;
                        let out_row = &mut out_plane[oy * ow + x_lo..oy * ow + x_hi];
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        let ix0 = x_lo * stride + kx - padding;
                        if stride == 1 {
                            let src = &in_row[ix0..ix0 + (x_hi - x_lo)];
                            for (dst, &s) in out_row.iter_mut().zip(src) {
                                *dst += wv * s;
                            }
                        } else {
                            for (n, dst) in out_row.iter_mut().enumerate() {
                                *dst += wv * in_row[ix0 + n * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input and kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor3<T>,
    pub kernels: KernelBank<T>,
}

/// Backward pass of [`conv2d_forward`] for the given upstream gradient.
pub fn conv2d_backward<T: Real>(
    grad_output: &Tensor3<T>,
    saved_input: &Tensor3<T>,
    kernels: &KernelBank<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let (kernels_grad, input_grad) = conv2d_backward_parts(grad_output, saved_input, kernels, stride, padding, true)?;
    Ok(ConvGrads {
        input: input_grad.expect("input gradient requested"),
        kernels: kernels_grad,
    })
}

/// Backward pass that can skip the input gradient (first network layer).
pub(crate) fn conv2d_backward_parts<T: Real>(
    grad_output: &Tensor3<T>,
    saved_input: &Tensor3<T>,
    kernels: &KernelBank<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<(KernelBank<T>, Option<Tensor3<T>>)> {
    let (oh, ow) = check_geometry(saved_input, kernels, stride, padding)?;
    check_dim(
        "conv2d backward",
        "output channels",
        kernels.out_channels(),
        grad_output.channels(),
    )?;
    check_dim("conv2d backward", "output height", oh, grad_output.height())?;
    check_dim("conv2d backward", "output width", ow, grad_output.width())?;

    let (ci, h, w) = saved_input.shape();
    let [co, _, kh, kw] = kernels.dims();
    let mut grad_k = KernelBank::zeros(co, ci, kh, kw);
    let mut grad_in = need_input_grad.then(|| Tensor3::zeros(ci, h, w));
    let kdata = kernels.data();

    for o in 0..co {
        let g_plane = grad_output.plane(o);
        for i in 0..ci {
            let in_plane = saved_input.plane(i);
            for ky in 0..kh {
                let (y_lo, y_hi) = valid_range(ky, padding, stride, h, oh);
                for kx in 0..kw {
                    let (x_lo, x_hi) = valid_range(kx, padding, stride, w, ow);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let kidx = ((o * ci + i) * kh + ky) * kw + kx;
                    let wv = kdata[kidx];
                    let ix0 = x_lo * stride + kx - padding;
                    let mut acc = T::zero();
                    for oy in y_lo..y_hi {
                        let iy = oy * stride + ky - padding;
                        let g_row = &g_plane[oy * ow + x_lo..oy * ow + x_hi];
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let src = &in_row[ix0..ix0 + (x_hi - x_lo)];
                            for (&g, &s) in g_row.iter().zip(src) {
                                acc += g * s;
                            }
                        } else {
                            for (n, &g) in g_row.iter().enumerate() {
                                acc += g * in_row[ix0 + n * stride];
                            }
                        }
                        if let Some(gi) = grad_in.as_mut() {
                            let gi_row = &mut gi.plane_mut(i)[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let dst = &mut gi_row[ix0..ix0 + (x_hi - x_lo)];
                                for (d, &g) in dst.iter_mut().zip(g_row) {
                                    *d += wv * g;
                                }
                            } else {
                                for (n, &g) in g_row.iter().enumerate() {
                                    gi_row[ix0 + n * stride] += wv * g;
                                }
                            }
                        }
                    }
                    grad_k.data_mut()[kidx] += acc;
                }
            }
        }
    }
    Ok((grad_k, grad_in))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng_derive;

    /// Direct nested-loop definition with explicit bounds checks.
    fn naive_conv(input: &Tensor3<f64>, k: &KernelBank<f64>, stride: usize, pad: usize) -> Tensor3<f64> {
        let (ci, h, w) = input.shape();
        let [co, _, kh, kw] = k.dims();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor3::zeros(co, oh, ow);
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for i in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += k.get(o, i, ky, kx) * input.get(i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(o, oy, ox, s);
                }
            }
        }
        out
    }

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor3<f64> {
        let mut rng = rng_derive(seed, 0);
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.normal()).collect()).unwrap()
    }

    fn random_kernels(co: usize, ci: usize, k: usize, seed: u64) -> KernelBank<f64> {
        let mut rng = rng_derive(seed, 1);
        KernelBank::from_vec(co, ci, k, k, (0..co * ci * k * k).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = random_tensor(1, 5, 7, 3).cast::<f32>();
        let k = KernelBank::from_vec(1, 1, 1, 1, vec![1.0f32]).unwrap();
        assert_eq!(conv2d_forward(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Tensor3::<f32>::zeros(3, 8, 8);
        let k = random_kernels(4, 3, 3, 9).cast::<f32>();
        let y = conv2d_forward(&x, &k, 2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_by_two_sum() {
        let x = Tensor3::from_vec(1, 2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let k = KernelBank::from_vec(1, 1, 2, 2, vec![1.0f32; 4]).unwrap();
        let y = conv2d_forward(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), (1, 1, 1));
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn matches_naive_for_strides_and_padding() {
        for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 0, 5), (2, 1, 3), (3, 2, 4)] {
            let x = random_tensor(2, 11, 9, 5);
            let kb = random_kernels(3, 2, k, 6);
            let fast = conv2d_forward(&x, &kb, stride, pad).unwrap();
            let slow = naive_conv(&x, &kb, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor3::<f32>::zeros(2, 4, 4);
        let k = KernelBank::<f32>::zeros(1, 3, 3, 3);
        match conv2d_forward(&x, &k, 1, 0) {
            Err(Error::Shape { axis, .. }) => assert_eq!(axis, "input channels"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor3::<f32>::zeros(1, 2, 2);
        let k = KernelBank::<f32>::zeros(1, 1, 3, 3);
        assert!(conv2d_forward(&x, &k, 1, 0).is_err());
        assert!(conv2d_forward(&x, &k, 1, 1).is_ok());
    }

    #[test]
    fn backward_zero_upstream() {
        let x = random_tensor(2, 6, 6, 1);
        let k = random_kernels(3, 2, 3, 2);
        let g = Tensor3::zeros(3, 4, 4);
        let grads = conv2d_backward(&g, &x, &k, 1, 0).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.kernels.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_identity_kernel() {
        let x = random_tensor(1, 4, 5, 1);
        let k = KernelBank::from_vec(1, 1, 1, 1, vec![1.0]).unwrap();
        let g = random_tensor(1, 4, 5, 8);
        let grads = conv2d_backward(&g, &x, &k, 1, 0).unwrap();
        assert_eq!(grads.input, g);
    }

    #[test]
    fn backward_rejects_wrong_upstream_shape() {
        let x = random_tensor(2, 6, 6, 1);
        let k = random_kernels(3, 2, 3, 2);
        let g = Tensor3::zeros(3, 5, 4);
        assert!(conv2d_backward(&g, &x, &k, 1, 0).is_err());
    }

    /// Central differences of L = Σ r ⊙ conv(x, K) for a fixed random r.
    #[test]
    fn backward_matches_finite_differences() {
        let h = 1e-3;
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
            let x = random_tensor(2, 6, 6, 11);
            let k = random_kernels(3, 2, 3, 12);
            let out = conv2d_forward(&x, &k, stride, pad).unwrap();
            let r = random_tensor(out.channels(), out.height(), out.width(), 13);
            let loss = |x: &Tensor3<f64>, k: &KernelBank<f64>| -> f64 {
                let y = naive_conv(x, k, stride, pad);
                y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            let grads = conv2d_backward(&r, &x, &k, stride, pad).unwrap();

            for idx in 0..x.data().len() {
                let mut xp = x.clone();
                xp.data_mut()[idx] += h;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= h;
                let fd = (loss(&xp, &k) - loss(&xm, &k)) / (2.0 * h);
                let an = grads.input.data()[idx];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-8));
            }
            for idx in 0..k.data().len() {
                let mut kp = k.clone();
                kp.data_mut()[idx] += h;
                let mut km = k.clone();
                km.data_mut()[idx] -= h;
                let fd = (loss(&x, &kp) - loss(&x, &km)) / (2.0 * h);
                let an = grads.kernels.data()[idx];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-8));
            }
        }
    }

    #[test]
    fn forward_is_linear() {
        let x = random_tensor(2, 7, 7, 21);
        let y = random_tensor(2, 7, 7, 22);
        let k = random_kernels(2, 2, 3, 23);
        let (a, b) = (0.7, -1.3);
        let mut combo = x.scaled(a);
        for (c, v) in combo.data_mut().iter_mut().zip(y.data()) {
            *c += b * v;
        }
        let lhs = conv2d_forward(&combo, &k, 1, 1).unwrap();
        let fx = conv2d_forward(&x, &k, 1, 1).unwrap();
        let fy = conv2d_forward(&y, &k, 1, 1).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(fx.data()).zip(fy.data()) {
            assert!((l - (a * p + b * q)).abs() < 1e-6);
        }
    }
}
